//! Negative sampling.
//!
//! Half of each pair's negatives come from the global unigram-power
//! distribution `(freq + 1)^α`; the other half are uniform over the market of
//! the positive (context) hotel.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;

use crate::catalog::Vocabulary;
use crate::error::{Error, Result};

/// Re-draws allowed per negative before a collision is accepted.
pub const MAX_REJECTIONS: usize = 100;

pub const DEFAULT_ALPHA: f64 = 0.75;

/// Where a negative was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Global,
    Market,
}

#[derive(Debug, Clone)]
pub struct NegativeSampler {
    global: WeightedAliasIndex<f64>,
    probabilities: Vec<f64>,
    markets: Vec<Vec<u32>>,
    market_of: Vec<u32>,
    negatives: usize,
    alpha: f64,
    seed: u64,
}

impl NegativeSampler {
    pub fn new(vocab: &Vocabulary, alpha: f64, negatives: usize, seed: u64) -> Result<Self> {
        if negatives < 2 || negatives % 2 != 0 {
            return Err(Error::Config(format!(
                "negatives per pair must be even and >= 2, got {negatives}"
            )));
        }
        if vocab.is_empty() {
            return Err(Error::Config("cannot sample from an empty vocabulary".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("bad sampling exponent {alpha}")));
        }
        let weights: Vec<f64> = vocab
            .frequencies()
            .iter()
            .map(|&f| (f as f64 + 1.0).powf(alpha))
            .collect();
        let total: f64 = weights.iter().sum();
        let probabilities = weights.iter().map(|w| w / total).collect();
        let global = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::Config(format!("sampling table: {e}")))?;
        Ok(NegativeSampler {
            global,
            probabilities,
            markets: vocab.market_members(),
            market_of: vocab.market_assignments().to_vec(),
            negatives,
            alpha,
            seed,
        })
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Normalized global distribution over hotel indices.
    pub fn global_probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn market_members(&self, market: u32) -> &[u32] {
        &self.markets[market as usize]
    }

    pub fn market_of(&self, hotel: u32) -> u32 {
        self.market_of[hotel as usize]
    }

    /// An independent generator for worker `stream`.
    pub fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn draw_global<R: Rng>(&self, rng: &mut R) -> u32 {
        self.global.sample(rng) as u32
    }

    pub fn draw_market<R: Rng>(&self, rng: &mut R, market: u32) -> u32 {
        let members = &self.markets[market as usize];
        members[rng.random_range(0..members.len())]
    }

    /// Draws `N` negatives for a `(target, positive)` pair: the first `N/2`
    /// from the global table, the rest uniformly from `market`. A draw equal
    /// to the target or the positive is redrawn up to [`MAX_REJECTIONS`]
    /// times and then accepted, so tiny markets cannot stall sampling.
    pub fn sample_negatives<R: Rng>(&self, rng: &mut R, target: u32, positive: u32, market: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.negatives);
        self.sample_into(rng, target, positive, market, &mut out);
        out
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, target: u32, positive: u32, market: u32, out: &mut Vec<u32>) {
        out.clear();
        let half = self.negatives / 2;
        for _ in 0..half {
            out.push(self.rejecting(|r| self.draw_global(r), rng, target, positive));
        }
        if self.markets.get(market as usize).is_none_or(|m| m.is_empty()) {
            // no market list: fall back to the global table
            for _ in 0..half {
                out.push(self.rejecting(|r| self.draw_global(r), rng, target, positive));
            }
            return;
        }
        for _ in 0..half {
            out.push(self.rejecting(|r| self.draw_market(r, market), rng, target, positive));
        }
    }

    /// Same draws as [`sample_negatives`](Self::sample_negatives), tagged with
    /// the table each one came from.
    pub fn sample_with_provenance<R: Rng>(
        &self,
        rng: &mut R,
        target: u32,
        positive: u32,
        market: u32,
    ) -> Vec<(u32, Provenance)> {
        let half = self.negatives / 2;
        self.sample_negatives(rng, target, positive, market)
            .into_iter()
            .enumerate()
            .map(|(i, h)| (h, if i < half { Provenance::Global } else { Provenance::Market }))
            .collect()
    }

    fn rejecting<R: Rng>(&self, mut draw: impl FnMut(&mut R) -> u32, rng: &mut R, target: u32, positive: u32) -> u32 {
        let mut h = draw(rng);
        for _ in 0..MAX_REJECTIONS {
            if h != target && h != positive {
                break;
            }
            h = draw(rng);
        }
        h
    }
}

pub fn build_sampler(vocab: &Vocabulary, alpha: f64, negatives: usize, seed: u64) -> Result<NegativeSampler> {
    NegativeSampler::new(vocab, alpha, negatives, seed)
}
