//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "EVEC" | version u32 | mode u8 | d_c d_a d_g d_e u32 | H u64 | A u32 | G u32
//! W_c (H x d_c) | [W_a (A x d_a) | W_g (G x d_g) | W_e] | W_out (H x d_e)   f32 row-major
//! vocabulary: M u32, M market names; per hotel: id, market u32, frequency u64
//! progress flag u8, then optionally the training progress block
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use crate::catalog::{Vocabulary, GEO_WIDTH};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{AttributeBlocks, Dims, Mode, ModelParams};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"EVEC";
pub const VERSION: u32 = 1;

/// Where a run stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProgress {
    pub step: u64,
    pub epoch: u64,
    pub initial_loss: Option<f64>,
    pub best_validation: Option<f64>,
    pub best_step: Option<u64>,
    pub recent_losses: Vec<f64>,
    /// The training config the run used, as TOML.
    pub config: String,
}

impl TrainingProgress {
    pub fn of(state: &TrainState, config: &str) -> Self {
        TrainingProgress {
            step: state.step,
            epoch: state.epoch,
            initial_loss: state.initial_loss,
            best_validation: state.best_validation,
            best_step: state.best_step,
            recent_losses: state.recent_losses.iter().copied().collect(),
            config: config.to_string(),
        }
    }

    /// Rebuilds a resumable state around `params`.
    pub fn into_state(self, params: ModelParams) -> TrainState {
        let mut s = TrainState::new(params);
        s.step = self.step;
        s.epoch = self.epoch;
        s.initial_loss = self.initial_loss;
        s.best_validation = self.best_validation;
        s.best_step = self.best_step;
        s.recent_losses = self.recent_losses.into();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub progress: Option<TrainingProgress>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        p.validate()?;
        if p.hotels() != self.vocab.len() {
            return Err(Error::Shape(format!(
                "model has {} hotels, vocabulary {}",
                p.hotels(),
                self.vocab.len()
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(match p.mode() {
            Mode::Enriched => 0,
            Mode::SessionOnly => 1,
        });
        for d in [p.dims.click, p.dims.amenity, p.dims.geo, p.dims.enriched] {
            put_u32(&mut out, d as u32);
        }
        put_u64(&mut out, p.hotels() as u64);
        put_u32(&mut out, p.amenity_width() as u32);
        put_u32(&mut out, if p.attributes.is_some() { GEO_WIDTH as u32 } else { 0 });
        put_matrix(&mut out, &p.click);
        if let Some(a) = &p.attributes {
            put_matrix(&mut out, &a.amenity);
            put_matrix(&mut out, &a.geo);
            put_matrix(&mut out, &a.fusion);
        }
        put_matrix(&mut out, &p.output);

        put_vocab(&mut out, &self.vocab);

        match &self.progress {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                put_u64(&mut out, t.step);
                put_u64(&mut out, t.epoch);
                put_opt_f64(&mut out, t.initial_loss);
                put_opt_f64(&mut out, t.best_validation);
                put_u64(&mut out, t.best_step.unwrap_or(u64::MAX));
                put_u32(&mut out, t.recent_losses.len() as u32);
                for l in &t.recent_losses {
                    out.extend_from_slice(&l.to_le_bytes());
                }
                put_str(&mut out, &t.config);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Error::Checkpoint);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mode = match r.u8()? {
            0 => Mode::Enriched,
            1 => Mode::SessionOnly,
            m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
        };
        let dims = Dims {
            click: r.u32()? as usize,
            amenity: r.u32()? as usize,
            geo: r.u32()? as usize,
            enriched: r.u32()? as usize,
        };
        let h = r.u64()? as usize;
        let a = r.u32()? as usize;
        let g = r.u32()? as usize;
        let click = r.matrix(h, dims.click)?;
        let attributes = match mode {
            Mode::SessionOnly => None,
            Mode::Enriched => {
                if g != GEO_WIDTH {
                    return Err(Error::Checkpoint(format!("geo input width {g}, expected {GEO_WIDTH}")));
                }
                Some(AttributeBlocks {
                    amenity: r.matrix(a, dims.amenity)?,
                    geo: r.matrix(g, dims.geo)?,
                    fusion: r.matrix(dims.concat(), dims.enriched)?,
                })
            }
        };
        let output = r.matrix(h, dims.enriched)?;
        let params = ModelParams {
            dims,
            click,
            attributes,
            output,
        };
        params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

        let vocab = read_vocab(&mut r, h)?;

        let progress = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let epoch = r.u64()?;
                let initial_loss = r.opt_f64()?;
                let best_validation = r.opt_f64()?;
                let best_step = Some(r.u64()?).filter(|&s| s != u64::MAX);
                let n = r.u32()? as usize;
                let recent_losses = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let config = r.string()?;
                Some(TrainingProgress {
                    step,
                    epoch,
                    initial_loss,
                    best_validation,
                    best_step,
                    recent_losses,
                    config,
                })
            }
            t => return Err(Error::Checkpoint(format!("bad progress flag {t}"))),
        };
        r.finish()?;
        Ok(Checkpoint {
            params,
            vocab,
            progress,
        })
    }

    /// Written atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_opt_f64(out: &mut Vec<u8>, v: Option<f64>) {
    match v {
        None => out.push(0),
        Some(x) => {
            out.push(1);
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_vocab(out: &mut Vec<u8>, v: &Vocabulary) {
    put_u32(out, v.markets().len() as u32);
    for m in v.markets() {
        put_str(out, m);
    }
    for i in 0..v.len() as u32 {
        put_str(out, v.id(i));
        put_u32(out, v.market_of(i));
        put_u64(out, v.frequency(i));
    }
}

pub(crate) fn read_vocab(r: &mut Reader, hotels: usize) -> Result<Vocabulary> {
    let m = r.u32()? as usize;
    let markets = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::with_capacity(hotels.min(1 << 20));
    let mut assign = Vec::with_capacity(hotels.min(1 << 20));
    let mut freq = Vec::with_capacity(hotels.min(1 << 20));
    for _ in 0..hotels {
        ids.push(r.string()?);
        assign.push(r.u32()?);
        freq.push(r.u64()?);
    }
    Vocabulary::from_parts(ids, freq, assign, markets).map_err(|e| r.fail(e.to_string()))
}

pub(crate) fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.reserve(m.as_slice().len() * 4);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    error: fn(String) -> Error,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], error: fn(String) -> Error) -> Self {
        Reader { bytes, pos: 0, error }
    }

    pub(crate) fn fail(&self, message: String) -> Error {
        (self.error)(message)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(self.fail(format!("bad option tag {t}"))),
        }
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.fail("string is not UTF-8".into()))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.fail("matrix size overflows".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}
