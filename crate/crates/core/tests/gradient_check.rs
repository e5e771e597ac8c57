use std::time::Instant;

use enrichvec::model::{Dims, Mode};
use enrichvec::trainer::{pair_loss, Block, Gradients};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{random_point, worst_error, AMENITY_WIDTH, HOTELS};

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (n, d) in (4..=8).cycle().take(10).enumerate() {
        let dims = Dims {
            click: d,
            amenity: 4 + n % 3,
            geo: 4,
            enriched: 12 - d,
        };
        for mode in [Mode::Enriched, Mode::SessionOnly] {
            let (w, checked) = worst_error(mode, dims, 100 + n as u64);
            assert!(checked > 0, "{mode} point {n}: nothing checked");
            assert!(w < 1e-3, "{mode} point {n}: relative error {w:.2e}");
            worst = worst.max(w);
        }
    }
    println!("worst relative error {worst:.2e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn every_block_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = Dims {
        click: 4,
        amenity: 5,
        geo: 4,
        enriched: 6,
    };
    let (p, f) = random_point(Mode::Enriched, dims, &mut rng);
    let mut g = Gradients::new(&p);
    pair_loss(0, 1, &[2, 3], &f, &p, &mut g).unwrap();
    for b in Block::ALL {
        let n = match b {
            Block::Click => HOTELS * dims.click,
            Block::Amenity => AMENITY_WIDTH * dims.amenity,
            Block::Geo => 3 * dims.geo,
            Block::Fusion => dims.concat() * dims.enriched,
            Block::Output => HOTELS * dims.enriched,
        };
        assert!((0..n).any(|i| g.get(b, i) != 0.0), "{b:?} has no gradient");
    }
}
