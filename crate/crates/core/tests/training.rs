use enrichvec::catalog::{FeatureTable, Vocabulary};
use enrichvec::evaluator::{hits_at_k, Candidates, Scorer};
use enrichvec::model::{log_sigmoid, EmbeddingSet, Mode, ModelParams};
use enrichvec::sessions::{next_click_pairs, SessionCorpus, TrainingPair};
use enrichvec::synthetic::SyntheticConfig;
use enrichvec::trainer::{evaluate_validation, MetricCollector, NoObserver, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{desk_config, synthetic};

fn two_hotels() -> (SessionCorpus<u32>, FeatureTable, Vocabulary) {
    let corpus = SessionCorpus {
        train: vec![vec![0, 1]],
        validation: vec![],
        test: vec![],
        split_seed: 0,
        split_ratios: [1.0, 0.0, 0.0],
    };
    let vocab = Vocabulary::from_parts(vec!["a".into(), "b".into()], vec![1, 1], vec![0, 0], vec!["m".into()]).unwrap();
    let features = FeatureTable::from_raw(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.0, 1.0, 0.5, 0.1, 0.99]).unwrap();
    (corpus, features, vocab)
}

/// Expected loss of both pairs of the session `[a, b]` when every negative
/// is the target or the positive with probability 1/2 each, which is what
/// the sampler does once rejection gives up on a two-hotel vocabulary.
fn expected_loss(params: &ModelParams, features: &FeatureTable, negatives: usize) -> f64 {
    let emb = EmbeddingSet::compute(params, features).unwrap();
    let dot = |t: u32, c: u32| {
        emb.enriched(t)
            .iter()
            .zip(params.output.row(c as usize))
            .map(|(a, &b)| a * b as f64)
            .sum::<f64>()
    };
    [(0u32, 1u32), (1, 0)]
        .iter()
        .map(|&(t, c)| {
            let n = negatives as f64;
            -log_sigmoid(dot(t, c)) - 0.5 * n * (log_sigmoid(-dot(t, t)) + log_sigmoid(-dot(t, c)))
        })
        .sum::<f64>()
        / 2.0
}

#[test]
fn two_hotel_smoke_run_lowers_loss_every_step() {
    let (corpus, features, vocab) = two_hotels();
    for mode in [Mode::SessionOnly, Mode::Enriched] {
        let cfg = TrainConfig {
            mode,
            learning_rate: Some(0.02),
            batch_size: 2,
            epochs: 50,
            negatives: 20,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&corpus, &features, &vocab, cfg.clone()).unwrap();
        let mut state = trainer.init_state().unwrap();
        let mut losses = vec![expected_loss(&state.params, &features, 20)];
        for step in 1..=50 {
            let budget = TrainConfig {
                max_steps: Some(step),
                ..cfg.clone()
            };
            Trainer::new(&corpus, &features, &vocab, budget)
                .unwrap()
                .run(&mut state, &mut NoObserver)
                .unwrap();
            losses.push(expected_loss(&state.params, &features, 20));
        }
        assert_eq!(state.step, 50);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{mode}: {losses:?}");
        }
        assert!(losses[50] < 0.5 * losses[0], "{mode}: {losses:?}");
    }
}

#[test]
fn loss_trend_and_session_only_size() {
    let (_, ds) = synthetic(&SyntheticConfig::default(), 0.0);
    let cfg = TrainConfig {
        epochs: 1,
        log_every: 100,
        ..desk_config(Mode::Enriched, 2.0)
    };
    let trainer = Trainer::new(&ds.corpus, &ds.features, &ds.vocab, cfg).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut log = MetricCollector::default();
    trainer.run(&mut state, &mut log).unwrap();
    let at_100 = log.records.iter().find(|r| r.step == 100).unwrap().loss;
    let end = log.records.last().unwrap();
    assert_eq!(end.step, trainer.steps_per_epoch());
    assert!(end.loss < at_100, "{} vs {at_100}", end.loss);
    assert!(end.val_hits10.is_some());

    let h = ds.vocab.len();
    let p = ModelParams::init(Mode::SessionOnly, TrainConfig::default().dims(), h, ds.features.amenity_width(), 1).unwrap();
    assert_eq!(p.parameter_count(), h * 32 + h * 32);
    let e = ModelParams::init(Mode::Enriched, TrainConfig::default().dims(), h, ds.features.amenity_width(), 1).unwrap();
    assert!(e.parameter_count() > p.parameter_count());
}

#[test]
fn random_scores_hit_at_chance() {
    // 20 markets of 50 hotels
    let h = 1000u32;
    let vocab = Vocabulary::from_parts(
        (0..h).map(|i| format!("h{i}")).collect(),
        vec![1; h as usize],
        (0..h).map(|i| i / 50).collect(),
        (0..20).map(|m| format!("m{m}")).collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table: Vec<f64> = (0..h * h).map(|_| rng.random()).collect();
    let score = |t: u32, c: u32| table[(t * h + c) as usize];
    let scorer = Scorer::Custom {
        name: "random",
        score: &score,
    };
    let filtered: Vec<TrainingPair> = (0..6000)
        .map(|_| {
            let t = rng.random_range(0..h);
            let mut c = t;
            while c == t {
                c = (t / 50) * 50 + rng.random_range(0..50);
            }
            TrainingPair { target: t, context: c }
        })
        .collect();
    let r = hits_at_k(&filtered, &[10], Candidates::Filtered, &scorer, &vocab).unwrap();
    let chance = 100.0 * 10.0 / 49.0;
    assert!((r.hit_rates[0] - chance).abs() < 3.0, "{} vs {chance}", r.hit_rates[0]);

    let raw: Vec<TrainingPair> = (0..6000)
        .map(|_| {
            let t = rng.random_range(0..h);
            let c = (t + 1 + rng.random_range(0..h - 1)) % h;
            TrainingPair { target: t, context: c }
        })
        .collect();
    let r = hits_at_k(&raw, &[10], Candidates::Raw, &scorer, &vocab).unwrap();
    assert!((r.hit_rates[0] - 1.0).abs() < 0.5, "{}", r.hit_rates[0]);
}

#[test]
fn untrained_model_sits_at_chance_and_filtering_helps_trained_one() {
    let (_, ds) = synthetic(&SyntheticConfig::default(), 0.0);
    let untrained = ModelParams::init(Mode::Enriched, TrainConfig::default().dims(), ds.vocab.len(), ds.features.amenity_width(), 8).unwrap();
    let v = evaluate_validation(&untrained, &ds.features, &ds.vocab, &ds.corpus, 10, 10_000, 1).unwrap();
    // popularity is not random, so allow a wide band around 10/39
    assert!(v < 40.0, "{v}");

    let cfg = TrainConfig {
        epochs: 1,
        ..desk_config(Mode::Enriched, 2.0)
    };
    let trainer = Trainer::new(&ds.corpus, &ds.features, &ds.vocab, cfg).unwrap();
    let mut state = trainer.init_state().unwrap();
    trainer.run(&mut state, &mut NoObserver).unwrap();
    let emb = EmbeddingSet::compute(&state.params, &ds.features).unwrap();
    let scorer = Scorer::ModelScore {
        params: &state.params,
        embeddings: &emb,
    };
    let pairs = next_click_pairs(&ds.corpus.test);
    assert!(pairs.len() >= 5000);
    let ks = [1, 10, 100];
    let raw = hits_at_k(&pairs, &ks, Candidates::Raw, &scorer, &ds.vocab).unwrap();
    let filtered = hits_at_k(&pairs, &ks, Candidates::Filtered, &scorer, &ds.vocab).unwrap();
    for (r, f) in raw.hit_rates.iter().zip(&filtered.hit_rates) {
        assert!(f >= r, "{raw:?} {filtered:?}");
    }
    assert!(filtered.hit_rates[1] > 3.0 * 100.0 * 10.0 / 39.0);
}

#[test]
fn divergence_is_detected() {
    let (_, ds) = synthetic(
        &SyntheticConfig {
            sessions: 2000,
            ..SyntheticConfig::default()
        },
        0.0,
    );
    let cfg = TrainConfig {
        learning_rate: Some(1e7),
        batch_size: 8,
        divergence_window: 20,
        ..desk_config(Mode::SessionOnly, 1e7)
    };
    let trainer = Trainer::new(&ds.corpus, &ds.features, &ds.vocab, cfg).unwrap();
    let mut state = trainer.init_state().unwrap();
    let err = trainer.run(&mut state, &mut NoObserver).unwrap_err();
    assert!(matches!(err, enrichvec::Error::Diverged { .. } | enrichvec::Error::NonFinite { .. }), "{err}");
}
