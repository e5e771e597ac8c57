//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use enrichvec::catalog::FeatureTable;
use enrichvec::dataset::{Dataset, DatasetOptions};
use enrichvec::model::{Dims, Mode, ModelParams};
use enrichvec::synthetic::{generate, SyntheticConfig, SyntheticData};
use enrichvec::trainer::{block_mut, pair_loss, Block, Gradients, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const HOTELS: usize = 6;
pub const AMENITY_WIDTH: usize = 7;

pub fn random_point(mode: Mode, dims: Dims, rng: &mut ChaCha8Rng) -> (ModelParams, FeatureTable) {
    let mut p = ModelParams::init(mode, dims, HOTELS, AMENITY_WIDTH, rng.random()).unwrap();
    for b in Block::ALL {
        if let Some(m) = block_mut(&mut p, b) {
            for v in m.as_mut_slice() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    let amenity: Vec<f64> = (0..HOTELS * AMENITY_WIDTH)
        .map(|_| if rng.random_bool(0.6) { rng.random_range(0.0..1.0) } else { 0.0 })
        .collect();
    let geo: Vec<f64> = (0..HOTELS * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (p, FeatureTable::from_raw(AMENITY_WIDTH, amenity, geo).unwrap())
}

fn loss_at(p: &ModelParams, f: &FeatureTable, t: u32, c: u32, negs: &[u32]) -> f64 {
    pair_loss(t, c, negs, f, p, &mut Gradients::new(p)).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate of every block present in `mode`.
pub fn worst_error(mode: Mode, dims: Dims, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // redraw points where the target embedding is identically zero: the loss
    // is flat there and there is nothing to compare
    let (mut p, f, target, context, negs, grads) = loop {
        let (p, f) = random_point(mode, dims, &mut rng);
        let target = rng.random_range(0..HOTELS as u32);
        let context = (target + 1 + rng.random_range(0..HOTELS as u32 - 1)) % HOTELS as u32;
        let negs: Vec<u32> = (0..4).map(|_| rng.random_range(0..HOTELS as u32)).collect();
        let mut grads = Gradients::new(&p);
        pair_loss(target, context, &negs, &f, &p, &mut grads).unwrap();
        if (0..HOTELS * p.dims.enriched).any(|i| grads.get(Block::Output, i) != 0.0) {
            break (p, f, target, context, negs, grads);
        }
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for b in Block::ALL {
        let Some(len) = block_mut(&mut p, b).map(|m| m.as_slice().len()) else { continue };
        for i in 0..len {
            let orig = block_mut(&mut p, b).unwrap().as_slice()[i];
            let up = (orig as f64 + H) as f32;
            let down = (orig as f64 - H) as f32;
            block_mut(&mut p, b).unwrap().as_mut_slice()[i] = up;
            let lu = loss_at(&p, &f, target, context, &negs);
            block_mut(&mut p, b).unwrap().as_mut_slice()[i] = down;
            let ld = loss_at(&p, &f, target, context, &negs);
            block_mut(&mut p, b).unwrap().as_mut_slice()[i] = orig;
            let numeric = (lu - ld) / (up as f64 - down as f64);
            let analytic = grads.get(b, i);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            worst = worst.max((analytic - numeric).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

/// The default synthetic corpus, optionally with a seeded fraction of hotels
/// removed from every training session.
pub fn synthetic(config: &SyntheticConfig, held_out_fraction: f64) -> (SyntheticData, Dataset) {
    let data = generate(config).unwrap();
    let mut options = DatasetOptions::default();
    if held_out_fraction > 0.0 {
        let mut ids: Vec<String> = data.catalog.iter().map(|r| r.hotel_id.clone()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
        ids.truncate((data.catalog.len() as f64 * held_out_fraction).round() as usize);
        ids.sort();
        options.held_out = ids;
    }
    let ds = Dataset::build(&data.catalog, &data.schema, &data.events, &options).unwrap();
    (data, ds)
}

pub fn held_out(data: &SyntheticData, ds: &Dataset) -> Vec<u32> {
    data.catalog
        .iter()
        .filter_map(|r| ds.vocab.index_of(&r.hotel_id))
        .filter(|&i| ds.vocab.is_cold_start(i))
        .collect()
}

/// Training settings used by the end-to-end checks on the synthetic corpus.
pub fn desk_config(mode: Mode, learning_rate: f64) -> TrainConfig {
    TrainConfig {
        mode,
        learning_rate: Some(learning_rate),
        batch_size: 256,
        log_every: 0,
        ..TrainConfig::default()
    }
}
