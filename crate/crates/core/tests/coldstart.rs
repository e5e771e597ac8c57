use enrichvec::coldstart::{align_catalog, haversine_km, impute_cold_start, similar_pool, Fallback, ImputationPolicy};
use enrichvec::dataset::{Dataset, DatasetOptions};
use enrichvec::matrix::norm;
use enrichvec::model::{Mode, ModelParams};
use enrichvec::synthetic::{generate, SyntheticConfig, SyntheticData};
use enrichvec::trainer::TrainConfig;
use enrichvec::Error;

mod common;
use common::{held_out, synthetic};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        hotels: 300,
        markets: 5,
        clusters: 4,
        sessions: 4000,
        ..SyntheticConfig::default()
    }
}

fn init(ds: &Dataset, seed: u64) -> ModelParams {
    ModelParams::init(Mode::Enriched, TrainConfig::default().dims(), ds.vocab.len(), ds.features.amenity_width(), seed).unwrap()
}

fn row_norm(p: &ModelParams, i: u32) -> f64 {
    norm(&p.click.row(i as usize).iter().map(|&v| v as f64).collect::<Vec<_>>())
}

#[test]
fn only_held_out_rows_change_and_stay_inside_the_pool_ball() {
    let (data, ds) = synthetic(&small(), 0.2);
    let cold = held_out(&data, &ds);
    // the held-out 60 plus any hotel the generator never clicked
    assert!(cold.len() >= 60);
    let before = init(&ds, 3);
    let mut after = before.clone();
    let policy = ImputationPolicy::default();
    let audit = impute_cold_start(&mut after, &data.catalog, &data.schema, &ds.vocab, &policy, None).unwrap();
    assert_eq!(audit.len(), cold.len());

    let records = align_catalog(&data.catalog, &ds.vocab).unwrap();
    for i in 0..ds.vocab.len() as u32 {
        if !ds.vocab.is_cold_start(i) {
            assert_eq!(after.click.row(i as usize), before.click.row(i as usize));
        }
    }
    assert_eq!(after.output, before.output);
    assert_eq!(after.attributes, before.attributes);

    let mut pooled = 0;
    for (&t, rec) in cold.iter().zip(&audit) {
        assert_eq!(rec.hotel_id, ds.vocab.id(t));
        let pool = similar_pool(records[t as usize], &records, &ds.vocab, &data.schema, &policy);
        assert_eq!(pool.len(), rec.pool_size);
        if pool.is_empty() {
            assert_ne!(rec.fallback, Fallback::None);
            continue;
        }
        pooled += 1;
        assert_eq!(rec.fallback, Fallback::None);
        let max = pool.iter().map(|&p| row_norm(&before, p)).fold(0.0, f64::max);
        assert!(row_norm(&after, t) <= max + 1e-6, "{}", ds.vocab.id(t));
    }
    assert!(pooled > cold.len() / 2, "{pooled}");
}

#[test]
fn pools_are_local_trained_and_repeatable() {
    let (data, ds) = synthetic(&small(), 0.2);
    let records = align_catalog(&data.catalog, &ds.vocab).unwrap();
    let policy = ImputationPolicy {
        pool_size: 7,
        ..ImputationPolicy::default()
    };
    for t in held_out(&data, &ds) {
        let target = records[t as usize];
        let pool = similar_pool(target, &records, &ds.vocab, &data.schema, &policy);
        assert!(pool.len() <= 7);
        assert_eq!(pool, similar_pool(target, &records, &ds.vocab, &data.schema, &policy));
        for w in pool.windows(2) {
            let d = |i: u32| policy.attribute_distance(target, records[i as usize], &data.schema);
            assert!(d(w[0]) <= d(w[1]));
        }
        for &p in &pool {
            let r = records[p as usize];
            assert!(!ds.vocab.is_cold_start(p));
            assert_eq!(r.market_id, target.market_id);
            assert!(haversine_km(target.latitude, target.longitude, r.latitude, r.longitude) <= 5.0);
        }
    }
}

#[test]
fn empty_pools_fall_back_to_market_then_global_means() {
    let (data, ds) = synthetic(&small(), 0.2);
    let cold = held_out(&data, &ds);
    let mut p = init(&ds, 4);
    let policy = ImputationPolicy {
        radius_km: 1e-9,
        ..ImputationPolicy::default()
    };
    let audit = impute_cold_start(&mut p, &data.catalog, &data.schema, &ds.vocab, &policy, Some(&cold)).unwrap();
    assert!(audit.iter().all(|r| r.fallback == Fallback::Market && r.pool_size == 0));

    // every hotel of market 0 held out: nothing in-market to average
    let data: SyntheticData = generate(&small()).unwrap();
    let market0 = &data.catalog[0].market_id;
    let options = DatasetOptions {
        held_out: data
            .catalog
            .iter()
            .filter(|r| &r.market_id == market0)
            .map(|r| r.hotel_id.clone())
            .collect(),
        ..DatasetOptions::default()
    };
    let ds = Dataset::build(&data.catalog, &data.schema, &data.events, &options).unwrap();
    let mut p = init(&ds, 5);
    let before = p.clone();
    let audit = impute_cold_start(&mut p, &data.catalog, &data.schema, &ds.vocab, &ImputationPolicy::default(), None).unwrap();
    let in_market0: Vec<_> = audit.iter().filter(|r| options.held_out.contains(&r.hotel_id)).collect();
    assert_eq!(in_market0.len(), options.held_out.len());
    assert!(in_market0.iter().all(|r| r.fallback == Fallback::Global));

    // the global mean of the untouched trained rows
    let trained: Vec<usize> = (0..ds.vocab.len()).filter(|&i| !ds.vocab.is_cold_start(i as u32)).collect();
    let first = ds.vocab.require(&in_market0[0].hotel_id).unwrap() as usize;
    for d in 0..p.dims.click {
        let mean = trained.iter().map(|&i| before.click.row(i)[d] as f64).sum::<f64>() / trained.len() as f64;
        assert!((p.click.row(first)[d] as f64 - mean).abs() < 1e-6);
    }
}

#[test]
fn trained_targets_are_refused() {
    let (data, ds) = synthetic(&small(), 0.2);
    let warm = (0..ds.vocab.len() as u32).find(|&i| !ds.vocab.is_cold_start(i)).unwrap();
    let mut p = init(&ds, 6);
    let before = p.clone();
    let err = impute_cold_start(&mut p, &data.catalog, &data.schema, &ds.vocab, &ImputationPolicy::default(), Some(&[warm]));
    assert!(matches!(err, Err(Error::Invalid(_))));
    assert_eq!(p, before);
}
