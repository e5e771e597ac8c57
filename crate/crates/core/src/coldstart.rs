//! Click-row imputation for hotels without training clicks.
//!
//! A cold hotel's click row becomes the mean click row of the most similar
//! trained hotels in its market within a geodesic radius. Its amenity and
//! geo facets come from its own attributes, as always.

use std::collections::BTreeMap;
use std::fmt;

use crate::catalog::{AttrValue, FeatureKind, FeatureSchema, HotelRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationPolicy {
    /// Feature name to non-negative weight.
    pub weights: BTreeMap<String, f64>,
    pub radius_km: f64,
    pub pool_size: usize,
}

impl Default for ImputationPolicy {
    fn default() -> Self {
        ImputationPolicy {
            weights: ["price_tier", "star_rating", "property_type", "room_count"]
                .iter()
                .map(|f| (f.to_string(), 1.0))
                .collect(),
            radius_km: 5.0,
            pool_size: 100,
        }
    }
}

impl ImputationPolicy {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if !(self.radius_km.is_finite() && self.radius_km > 0.0) {
            return Err(Error::Config(format!("radius_km must be > 0, got {}", self.radius_km)));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        for (name, w) in &self.weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("weight for `{name}` must be non-negative")));
            }
            if schema.feature(name).is_none() {
                return Err(Error::UnknownAttribute(name.clone()));
            }
        }
        Ok(())
    }

    /// Weighted attribute distance: numeric features contribute
    /// `|a - b| / (max - min)`, categorical ones 0 or 1 for match or mismatch.
    /// A value missing on either side contributes 1.
    pub fn attribute_distance(&self, a: &HotelRecord, b: &HotelRecord, schema: &FeatureSchema) -> f64 {
        self.weights
            .iter()
            .map(|(name, w)| {
                let Some(spec) = schema.feature(name) else { return 0.0 };
                let d = match (&spec.kind, a.attribute(name), b.attribute(name)) {
                    (FeatureKind::Numeric { min, max }, Some(AttrValue::Number(x)), Some(AttrValue::Number(y))) => {
                        let span = max - min;
                        if span > 0.0 {
                            ((x - y).abs() / span).min(1.0)
                        } else {
                            0.0
                        }
                    }
                    (FeatureKind::Categorical { .. }, Some(AttrValue::Category(x)), Some(AttrValue::Category(y))) => {
                        if x == y {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    _ => 1.0,
                };
                w * d
            })
            .sum()
    }
}

/// Which rule produced an imputed row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// Mean of the similar-hotel pool.
    None,
    /// Pool empty: mean of the market's trained hotels.
    Market,
    /// Market has no trained hotels: mean of all trained hotels.
    Global,
}

impl fmt::Display for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fallback::None => "none",
            Fallback::Market => "market_mean",
            Fallback::Global => "global_mean",
        })
    }
}

/// Catalog records addressed by vocabulary index.
pub fn align_catalog<'a>(catalog: &'a [HotelRecord], vocab: &Vocabulary) -> Result<Vec<&'a HotelRecord>> {
    let mut slots: Vec<Option<&HotelRecord>> = vec![None; vocab.len()];
    for r in catalog {
        if let Some(i) = vocab.index_of(&r.hotel_id) {
            slots[i as usize] = Some(r);
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::UnknownHotel(vocab.id(i as u32).to_string())))
        .collect()
}

/// Trained hotels in the target's market within `radius_km`, most similar
/// first (ties by index), at most `pool_size` of them.
pub fn similar_pool(
    target: &HotelRecord,
    records: &[&HotelRecord],
    vocab: &Vocabulary,
    schema: &FeatureSchema,
    policy: &ImputationPolicy,
) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let i = i as u32;
            if r.hotel_id == target.hotel_id || r.market_id != target.market_id || vocab.is_cold_start(i) {
                return None;
            }
            let km = haversine_km(target.latitude, target.longitude, r.latitude, r.longitude);
            (km <= policy.radius_km).then(|| (policy.attribute_distance(target, r, schema), i))
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(policy.pool_size);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn mean_rows(params: &ModelParams, rows: &[u32]) -> Vec<f32> {
    let d = params.dims.click;
    let mut acc = vec![0.0f64; d];
    for &r in rows {
        for (a, v) in acc.iter_mut().zip(params.click.row(r as usize)) {
            *a += *v as f64;
        }
    }
    acc.iter().map(|a| (a / rows.len() as f64) as f32).collect()
}

/// New click row for `target` from `pool`, falling back to the market's and
/// then all trained hotels' mean row.
pub fn impute_click_row(target: u32, pool: &[u32], params: &ModelParams, vocab: &Vocabulary) -> Result<(Vec<f32>, Fallback)> {
    if !pool.is_empty() {
        return Ok((mean_rows(params, pool), Fallback::None));
    }
    let market = vocab.market_of(target);
    let trained = |i: &u32| *i != target && !vocab.is_cold_start(*i);
    let in_market: Vec<u32> = (0..vocab.len() as u32)
        .filter(|i| trained(i) && vocab.market_of(*i) == market)
        .collect();
    if !in_market.is_empty() {
        return Ok((mean_rows(params, &in_market), Fallback::Market));
    }
    let all: Vec<u32> = (0..vocab.len() as u32).filter(trained).collect();
    if all.is_empty() {
        return Err(Error::Invalid("no trained hotels to impute from".into()));
    }
    Ok((mean_rows(params, &all), Fallback::Global))
}

/// One line of the imputation audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationRecord {
    pub hotel_id: String,
    pub pool_size: usize,
    pub fallback: Fallback,
}

pub fn audit_csv(records: &[ImputationRecord]) -> String {
    let mut out = String::from("target,pool_size,fallback\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.hotel_id, r.pool_size, r.fallback));
    }
    out
}

/// Overwrites the click rows of `targets` (all cold-start hotels when
/// `None`). Rows are computed from the incoming parameters before any is
/// written, and trained rows are never modified.
pub fn impute_cold_start(
    params: &mut ModelParams,
    catalog: &[HotelRecord],
    schema: &FeatureSchema,
    vocab: &Vocabulary,
    policy: &ImputationPolicy,
    targets: Option<&[u32]>,
) -> Result<Vec<ImputationRecord>> {
    policy.validate(schema)?;
    if params.hotels() != vocab.len() {
        return Err(Error::Shape("model and vocabulary sizes differ".into()));
    }
    let records = align_catalog(catalog, vocab)?;
    let targets: Vec<u32> = match targets {
        Some(t) => t.to_vec(),
        None => (0..vocab.len() as u32).filter(|&i| vocab.is_cold_start(i)).collect(),
    };
    let mut rows = Vec::with_capacity(targets.len());
    let mut audit = Vec::with_capacity(targets.len());
    for &t in &targets {
        if t as usize >= vocab.len() {
            return Err(Error::IndexOutOfRange {
                index: t as usize,
                size: vocab.len(),
            });
        }
        if !vocab.is_cold_start(t) {
            return Err(Error::Invalid(format!("hotel `{}` has training clicks", vocab.id(t))));
        }
        let pool = similar_pool(records[t as usize], &records, vocab, schema, policy);
        let (row, fallback) = impute_click_row(t, &pool, params, vocab)?;
        rows.push(row);
        audit.push(ImputationRecord {
            hotel_id: vocab.id(t).to_string(),
            pool_size: pool.len(),
            fallback,
        });
    }
    for (&t, row) in targets.iter().zip(rows) {
        params.click.row_mut(t as usize).copy_from_slice(&row);
    }
    Ok(audit)
}
