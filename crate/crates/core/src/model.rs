//! Trainable parameters and the forward pass.
//!
//! Each input facet goes through a normalized projection
//! `f(x; W) = relu(xW / ‖xW‖)`. The enriched model concatenates the click,
//! amenity and geography facets and fuses them with
//! `V_e = relu([V_c, V_a, V_g] · W_e)`; the session-only model uses `V_c`
//! directly. Context scores are `log σ(V_e(target) · W_out[context])`, with
//! `W_out` a separate output matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{encode_amenities, encode_geo, FeatureSchema, FeatureTable, HotelRecord, GEO_WIDTH};
use crate::error::{Error, Result};
use crate::matrix::{dot, dot_f32, Matrix};

/// Norms at or below this are treated as zero by the normalized projection.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Enriched,
    SessionOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Enriched => "enriched",
            Mode::SessionOnly => "session_only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enriched" => Ok(Mode::Enriched),
            "session_only" | "session-only" | "session" => Ok(Mode::SessionOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Embedding widths `(d_c, d_a, d_g, d_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub click: usize,
    pub amenity: usize,
    pub geo: usize,
    pub enriched: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            click: 32,
            amenity: 15,
            geo: 5,
            enriched: 32,
        }
    }
}

impl Dims {
    pub fn concat(&self) -> usize {
        self.click + self.amenity + self.geo
    }

    /// Dimensions as used by `mode`: session-only drops the attribute facets
    /// and makes the enriched width equal the click width.
    pub fn for_mode(self, mode: Mode) -> Dims {
        match mode {
            Mode::Enriched => self,
            Mode::SessionOnly => Dims {
                click: self.click,
                amenity: 0,
                geo: 0,
                enriched: self.click,
            },
        }
    }
}

/// Attribute-side blocks, present only in the enriched model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBlocks {
    /// `A x d_a`
    pub amenity: Matrix,
    /// `3 x d_g`
    pub geo: Matrix,
    /// `(d_c + d_a + d_g) x d_e`
    pub fusion: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    /// `H x d_c`; row lookup is the one-hot product.
    pub click: Matrix,
    pub attributes: Option<AttributeBlocks>,
    /// `H x d_e`; row `i` is hotel `i`'s output vector.
    pub output: Matrix,
}

impl ModelParams {
    /// Uniform init in `[-0.5/fan_in, 0.5/fan_in]`. Lookup tables (click and
    /// output) use their embedding width as fan-in.
    pub fn init(mode: Mode, dims: Dims, hotels: usize, amenity_width: usize, seed: u64) -> Result<Self> {
        let dims = dims.for_mode(mode);
        if dims.click == 0 || dims.enriched == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if mode == Mode::Enriched && (dims.amenity == 0 || dims.geo == 0) {
            return Err(Error::Config("enriched mode needs amenity and geo widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let click = Matrix::uniform(hotels, dims.click, 0.5 / dims.click as f64, &mut rng);
        let attributes = match mode {
            Mode::SessionOnly => None,
            Mode::Enriched => {
                if amenity_width == 0 {
                    return Err(Error::Config("enriched mode needs a non-empty amenity schema".into()));
                }
                Some(AttributeBlocks {
                    amenity: Matrix::uniform(amenity_width, dims.amenity, 0.5 / amenity_width as f64, &mut rng),
                    geo: Matrix::uniform(GEO_WIDTH, dims.geo, 0.5 / GEO_WIDTH as f64, &mut rng),
                    fusion: Matrix::uniform(dims.concat(), dims.enriched, 0.5 / dims.concat() as f64, &mut rng),
                })
            }
        };
        let output = Matrix::uniform(hotels, dims.enriched, 0.5 / dims.enriched as f64, &mut rng);
        Ok(ModelParams {
            dims,
            click,
            attributes,
            output,
        })
    }

    pub fn mode(&self) -> Mode {
        if self.attributes.is_some() {
            Mode::Enriched
        } else {
            Mode::SessionOnly
        }
    }

    pub fn hotels(&self) -> usize {
        self.click.rows()
    }

    pub fn amenity_width(&self) -> usize {
        self.attributes.as_ref().map_or(0, |a| a.amenity.rows())
    }

    pub fn parameter_count(&self) -> usize {
        let dense = self.attributes.as_ref().map_or(0, |a| {
            a.amenity.as_slice().len() + a.geo.as_slice().len() + a.fusion.as_slice().len()
        });
        self.click.as_slice().len() + self.output.as_slice().len() + dense
    }

    pub fn is_finite(&self) -> bool {
        self.click.is_finite()
            && self.output.is_finite()
            && self.attributes.as_ref().is_none_or(|a| {
                a.amenity.is_finite() && a.geo.is_finite() && a.fusion.is_finite()
            })
    }

    /// Checks matrix shapes against each other and the declared dims.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let h = self.hotels();
        let bad = |what: &str| Err(Error::Shape(what.to_string()));
        if self.click.cols() != d.click || self.output.rows() != h || self.output.cols() != d.enriched {
            return bad("click/output matrices disagree with dims");
        }
        match &self.attributes {
            None => {
                if d.enriched != d.click {
                    return bad("session-only model must have d_e = d_c");
                }
            }
            Some(a) => {
                if a.amenity.cols() != d.amenity
                    || a.geo.rows() != GEO_WIDTH
                    || a.geo.cols() != d.geo
                    || a.fusion.rows() != d.concat()
                    || a.fusion.cols() != d.enriched
                {
                    return bad("attribute blocks disagree with dims");
                }
            }
        }
        Ok(())
    }

    fn check_index(&self, index: u32) -> Result<usize> {
        let i = index as usize;
        if i >= self.hotels() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: self.hotels(),
            });
        }
        Ok(i)
    }
}

/// `relu(y / ‖y‖)`, or zeros when `‖y‖ <= NORM_EPSILON`. Returns the output
/// and the norm of `y`.
pub fn normalize_relu(y: &[f64]) -> (Vec<f64>, f64) {
    let n = dot(y, y).sqrt();
    if n <= NORM_EPSILON {
        return (vec![0.0; y.len()], n);
    }
    (y.iter().map(|v| (v / n).max(0.0)).collect(), n)
}

/// The normalized projection layer `relu(xW / ‖xW‖)`.
pub fn normalized_projection(x: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    Ok(normalize_relu(&w.left_mul(x)?).0)
}

/// `relu([V_c, V_a, V_g] · W_e)`.
pub fn fuse_enriched(click: &[f64], amenity: &[f64], geo: &[f64], fusion: &Matrix) -> Result<Vec<f64>> {
    let concat: Vec<f64> = click.iter().chain(amenity).chain(geo).copied().collect();
    Ok(relu(fusion.left_mul(&concat)?))
}

fn relu(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    v
}

/// Numerically stable `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probability that `context_index` is a context of the hotel whose
/// enriched vector is `enriched`.
pub fn score_context(enriched: &[f64], context_index: u32, params: &ModelParams) -> Result<f64> {
    let c = params.check_index(context_index)?;
    if enriched.len() != params.dims.enriched {
        return Err(Error::Shape("enriched vector width".into()));
    }
    Ok(log_sigmoid(dot_f32(params.output.row(c), enriched)))
}

/// Intermediates of one facet's normalized projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetForward {
    /// `y / ‖y‖` before the relu (zeros when degenerate).
    pub unit: Vec<f64>,
    /// `relu(y / ‖y‖)`
    pub out: Vec<f64>,
    /// `‖y‖`
    pub norm: f64,
}

impl FacetForward {
    fn from_pre(y: &[f64]) -> Self {
        let norm = dot(y, y).sqrt();
        if norm <= NORM_EPSILON {
            return FacetForward {
                unit: vec![0.0; y.len()],
                out: vec![0.0; y.len()],
                norm,
            };
        }
        let unit: Vec<f64> = y.iter().map(|v| v / norm).collect();
        let out = unit.iter().map(|v| v.max(0.0)).collect();
        FacetForward { unit, out, norm }
    }

    /// Back-propagates `grad_out` through relu and the normalization:
    /// `dL/dy = (I - ûûᵀ) (grad_out ⊙ [û > 0]) / ‖y‖`.
    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        if self.norm <= NORM_EPSILON {
            return vec![0.0; grad_out.len()];
        }
        let gated: Vec<f64> = grad_out
            .iter()
            .zip(&self.unit)
            .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
            .collect();
        let along = dot(&self.unit, &gated);
        gated
            .iter()
            .zip(&self.unit)
            .map(|(g, u)| (g - u * along) / self.norm)
            .collect()
    }
}

/// Full forward pass for one hotel, keeping what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct HotelForward {
    pub click: FacetForward,
    pub amenity: Option<FacetForward>,
    pub geo: Option<FacetForward>,
    /// Fusion pre-activation `[V_c, V_a, V_g] · W_e` (enriched only).
    pub fused_pre: Vec<f64>,
    pub enriched: Vec<f64>,
}

impl HotelForward {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.click.out.clone();
        if let Some(a) = &self.amenity {
            v.extend_from_slice(&a.out);
        }
        if let Some(g) = &self.geo {
            v.extend_from_slice(&g.out);
        }
        v
    }
}

/// Runs the forward pass for hotel `index` with encoded inputs.
pub fn forward(index: u32, amenity_input: &[f64], geo_input: &[f64], params: &ModelParams) -> Result<HotelForward> {
    let i = params.check_index(index)?;
    let click_pre: Vec<f64> = params.click.row(i).iter().map(|&v| v as f64).collect();
    let click = FacetForward::from_pre(&click_pre);
    let Some(blocks) = &params.attributes else {
        let enriched = click.out.clone();
        return Ok(HotelForward {
            click,
            amenity: None,
            geo: None,
            fused_pre: Vec::new(),
            enriched,
        });
    };
    let amenity = FacetForward::from_pre(&blocks.amenity.left_mul(amenity_input)?);
    let geo = FacetForward::from_pre(&blocks.geo.left_mul(geo_input)?);
    let concat: Vec<f64> = click
        .out
        .iter()
        .chain(&amenity.out)
        .chain(&geo.out)
        .copied()
        .collect();
    let fused_pre = blocks.fusion.left_mul(&concat)?;
    let enriched = fused_pre.iter().map(|v| v.max(0.0)).collect();
    Ok(HotelForward {
        click,
        amenity: Some(amenity),
        geo: Some(geo),
        fused_pre,
        enriched,
    })
}

/// One hotel's materialized vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HotelEmbedding {
    pub click: Vec<f64>,
    pub amenity: Vec<f64>,
    pub geo: Vec<f64>,
    pub enriched: Vec<f64>,
}

pub fn embed_hotel(index: u32, amenity_input: &[f64], geo_input: &[f64], params: &ModelParams) -> Result<HotelEmbedding> {
    let f = forward(index, amenity_input, geo_input, params)?;
    Ok(HotelEmbedding {
        click: f.click.out,
        amenity: f.amenity.map(|a| a.out).unwrap_or_default(),
        geo: f.geo.map(|g| g.out).unwrap_or_default(),
        enriched: f.enriched,
    })
}

/// Which vector block a similarity query reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VectorKind {
    Click,
    Amenity,
    Geo,
    /// Unfused `[V_c, V_a, V_g]`.
    Concatenated,
    Enriched,
}

impl VectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorKind::Click => "click",
            VectorKind::Amenity => "amenity",
            VectorKind::Geo => "geo",
            VectorKind::Concatenated => "concatenated",
            VectorKind::Enriched => "enriched",
        }
    }
}

impl std::str::FromStr for VectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "click" => VectorKind::Click,
            "amenity" => VectorKind::Amenity,
            "geo" => VectorKind::Geo,
            "concatenated" | "concat" => VectorKind::Concatenated,
            "enriched" => VectorKind::Enriched,
            other => return Err(Error::Config(format!("unknown vector kind `{other}`"))),
        })
    }
}

impl std::fmt::Display for VectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-hotel `V_c`, `V_a`, `V_g`, `V_e`, stored as contiguous blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dims: Dims,
    click: Vec<f64>,
    amenity: Vec<f64>,
    geo: Vec<f64>,
    enriched: Vec<f64>,
}

impl EmbeddingSet {
    /// Forward pass for every hotel.
    pub fn compute(params: &ModelParams, features: &FeatureTable) -> Result<Self> {
        let h = params.hotels();
        if features.len() != h {
            return Err(Error::Shape(format!(
                "feature table has {} rows, model has {h} hotels",
                features.len()
            )));
        }
        let mut set = EmbeddingSet::empty(params.dims, h);
        for i in 0..h as u32 {
            let e = embed_hotel(i, features.amenity(i), features.geo(i), params)?;
            set.store(i, &e);
        }
        Ok(set)
    }

    /// Builds a set from raw rows, e.g. vectors read back from an export.
    pub fn from_rows(dims: Dims, rows: &[HotelEmbedding]) -> Result<Self> {
        let mut set = EmbeddingSet::empty(dims, rows.len());
        for (i, e) in rows.iter().enumerate() {
            if e.click.len() != dims.click
                || e.amenity.len() != dims.amenity
                || e.geo.len() != dims.geo
                || e.enriched.len() != dims.enriched
            {
                return Err(Error::Shape(format!("row {i} does not match dims")));
            }
            set.store(i as u32, e);
        }
        Ok(set)
    }

    fn empty(dims: Dims, h: usize) -> Self {
        EmbeddingSet {
            dims,
            click: vec![0.0; h * dims.click],
            amenity: vec![0.0; h * dims.amenity],
            geo: vec![0.0; h * dims.geo],
            enriched: vec![0.0; h * dims.enriched],
        }
    }

    fn store(&mut self, index: u32, e: &HotelEmbedding) {
        let i = index as usize;
        let d = self.dims;
        self.click[i * d.click..(i + 1) * d.click].copy_from_slice(&e.click);
        self.amenity[i * d.amenity..(i + 1) * d.amenity].copy_from_slice(&e.amenity);
        self.geo[i * d.geo..(i + 1) * d.geo].copy_from_slice(&e.geo);
        self.enriched[i * d.enriched..(i + 1) * d.enriched].copy_from_slice(&e.enriched);
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.enriched.len() / self.dims.enriched.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn click(&self, index: u32) -> &[f64] {
        let (i, d) = (index as usize, self.dims.click);
        &self.click[i * d..(i + 1) * d]
    }

    pub fn amenity(&self, index: u32) -> &[f64] {
        let (i, d) = (index as usize, self.dims.amenity);
        &self.amenity[i * d..(i + 1) * d]
    }

    pub fn geo(&self, index: u32) -> &[f64] {
        let (i, d) = (index as usize, self.dims.geo);
        &self.geo[i * d..(i + 1) * d]
    }

    pub fn enriched(&self, index: u32) -> &[f64] {
        let (i, d) = (index as usize, self.dims.enriched);
        &self.enriched[i * d..(i + 1) * d]
    }

    pub fn concatenated(&self, index: u32) -> Vec<f64> {
        let mut v = self.click(index).to_vec();
        v.extend_from_slice(self.amenity(index));
        v.extend_from_slice(self.geo(index));
        v
    }

    pub fn vector(&self, kind: VectorKind, index: u32) -> Vec<f64> {
        match kind {
            VectorKind::Click => self.click(index).to_vec(),
            VectorKind::Amenity => self.amenity(index).to_vec(),
            VectorKind::Geo => self.geo(index).to_vec(),
            VectorKind::Concatenated => self.concatenated(index),
            VectorKind::Enriched => self.enriched(index).to_vec(),
        }
    }

    pub fn width(&self, kind: VectorKind) -> usize {
        match kind {
            VectorKind::Click => self.dims.click,
            VectorKind::Amenity => self.dims.amenity,
            VectorKind::Geo => self.dims.geo,
            VectorKind::Concatenated => self.dims.concat(),
            VectorKind::Enriched => self.dims.enriched,
        }
    }

    /// All vectors of one kind as a dense row-major block.
    pub fn matrix(&self, kind: VectorKind) -> Vec<f64> {
        match kind {
            VectorKind::Click => self.click.clone(),
            VectorKind::Amenity => self.amenity.clone(),
            VectorKind::Geo => self.geo.clone(),
            VectorKind::Enriched => self.enriched.clone(),
            VectorKind::Concatenated => (0..self.len() as u32).flat_map(|i| self.concatenated(i)).collect(),
        }
    }

    pub fn get(&self, index: u32) -> HotelEmbedding {
        HotelEmbedding {
            click: self.click(index).to_vec(),
            amenity: self.amenity(index).to_vec(),
            geo: self.geo(index).to_vec(),
            enriched: self.enriched(index).to_vec(),
        }
    }

    /// Recomputes one hotel's vectors from an updated record without
    /// touching any weights. Returns the new entry.
    pub fn refresh(
        &mut self,
        index: u32,
        record: &HotelRecord,
        schema: &FeatureSchema,
        params: &ModelParams,
    ) -> Result<HotelEmbedding> {
        let e = refresh_embedding(index, record, schema, params)?;
        if index as usize >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: index as usize,
                size: self.len(),
            });
        }
        self.store(index, &e);
        Ok(e)
    }
}

/// Forward pass for one hotel from a (possibly updated) catalog record.
pub fn refresh_embedding(
    index: u32,
    record: &HotelRecord,
    schema: &FeatureSchema,
    params: &ModelParams,
) -> Result<HotelEmbedding> {
    params.check_index(index)?;
    record.validate(schema)?;
    let amenity = encode_amenities(record, schema)?;
    let amenity_input: &[f64] = if params.attributes.is_some() { &amenity } else { &[] };
    embed_hotel(index, amenity_input, &encode_geo(record), params)
}
