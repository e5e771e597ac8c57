//! Batch SGD on the negative-sampling objective with exponential learning
//! rate decay.
//!
//! Gradients are exact and analytic. Per batch, every pair contributes to the
//! output rows it touches and to `dL/dV_e` of its target; the target side
//! (fusion, projections, click row) is then back-propagated once per distinct
//! target, which is valid because that part of the gradient is linear in
//! `dL/dV_e` for fixed parameters.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{FeatureTable, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluator::{hits_at_k, sample_pairs, Candidates, Scorer};
use crate::matrix::{dot_f32, Matrix};
use crate::model::{forward, log_sigmoid, sigmoid, Dims, EmbeddingSet, HotelForward, Mode, ModelParams};
use crate::sampler::NegativeSampler;
use crate::sessions::{append_pairs, next_click_pairs, SessionCorpus, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Adaptive; tends to overfit the first batches on this objective.
    Adagrad,
    /// Adaptive; tends to overfit the first batches on this objective.
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub click_dim: usize,
    pub amenity_dim: usize,
    pub geo_dim: usize,
    pub enriched_dim: usize,
    /// Initial step size; defaults to 0.05 (enriched) or 0.5 (session-only).
    pub learning_rate: Option<f64>,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the run stops at whichever of
    /// `epochs` and `max_steps` comes first.
    pub max_steps: Option<u64>,
    pub window: usize,
    pub negatives: usize,
    pub alpha: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub sampler_seed: u64,
    /// Steps between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    /// Steps between metric records; 0 logs only at epoch ends.
    pub log_every: u64,
    /// Steps between validation passes; 0 validates at epoch ends.
    pub eval_every: u64,
    pub eval_pairs: usize,
    pub optimizer: OptimizerKind,
    pub divergence_window: usize,
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = Dims::default();
        TrainConfig {
            mode: Mode::Enriched,
            click_dim: dims.click,
            amenity_dim: dims.amenity,
            geo_dim: dims.geo,
            enriched_dim: dims.enriched,
            learning_rate: None,
            decay_rate: 0.95,
            decay_steps: 10_000,
            batch_size: 4096,
            epochs: 5,
            max_steps: None,
            window: 3,
            negatives: 20,
            alpha: crate::sampler::DEFAULT_ALPHA,
            init_seed: 1,
            shuffle_seed: 2,
            sampler_seed: 3,
            checkpoint_every: 0,
            log_every: 100,
            eval_every: 0,
            eval_pairs: 10_000,
            optimizer: OptimizerKind::Sgd,
            divergence_window: 100,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            click: self.click_dim,
            amenity: self.amenity_dim,
            geo: self.geo_dim,
            enriched: self.enriched_dim,
        }
        .for_mode(self.mode)
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            Mode::Enriched => 0.05,
            Mode::SessionOnly => 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let lr = self.effective_learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return bad(format!("learning_rate must be > 0, got {lr}"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must be in (0, 1], got {}", self.decay_rate));
        }
        if self.decay_steps == 0 {
            return bad("decay_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.negatives < 2 || self.negatives % 2 != 0 {
            return bad(format!("negatives must be even and >= 2, got {}", self.negatives));
        }
        if self.divergence_window == 0 || !(self.divergence_factor > 0.0) {
            return bad("divergence detector needs a positive window and factor".into());
        }
        let d = self.dims();
        if d.click == 0 || d.enriched == 0 || (self.mode == Mode::Enriched && (d.amenity == 0 || d.geo == 0)) {
            return bad("embedding widths must be positive".into());
        }
        Ok(())
    }

    /// Learning rate at step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        lr_at(self.effective_learning_rate(), self.decay_rate, self.decay_steps, t)
    }
}

/// `lr0 · decay_rate^(t / decay_steps)`, evaluated in closed form.
pub fn lr_at(lr0: f64, decay_rate: f64, decay_steps: u64, t: u64) -> f64 {
    lr0 * decay_rate.powf(t as f64 / decay_steps as f64)
}

/// Gradient rows for a lookup table, dense storage with a touched list.
#[derive(Debug, Clone)]
pub struct RowGrad {
    width: usize,
    data: Vec<f64>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl RowGrad {
    fn new(rows: usize, width: usize) -> Self {
        RowGrad {
            width,
            data: vec![0.0; rows * width],
            touched: Vec::new(),
            mark: vec![false; rows],
        }
    }

    fn row_mut(&mut self, r: u32) -> &mut [f64] {
        let i = r as usize;
        if !self.mark[i] {
            self.mark[i] = true;
            self.touched.push(r);
        }
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    /// Accumulated gradient for row `r`, if it was touched.
    pub fn row(&self, r: u32) -> Option<&[f64]> {
        let i = r as usize;
        self.mark[i].then(|| &self.data[i * self.width..(i + 1) * self.width])
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    fn clear(&mut self) {
        for &r in &self.touched {
            let i = r as usize;
            self.mark[i] = false;
            self.data[i * self.width..(i + 1) * self.width].fill(0.0);
        }
        self.touched.clear();
    }
}

/// Parameter blocks, for addressing individual coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Click,
    Amenity,
    Geo,
    Fusion,
    Output,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Click, Block::Amenity, Block::Geo, Block::Fusion, Block::Output];
}

/// Mutable access to one block; `None` for attribute blocks of a
/// session-only model.
pub fn block_mut(params: &mut ModelParams, block: Block) -> Option<&mut Matrix> {
    match block {
        Block::Click => Some(&mut params.click),
        Block::Output => Some(&mut params.output),
        Block::Amenity => params.attributes.as_mut().map(|a| &mut a.amenity),
        Block::Geo => params.attributes.as_mut().map(|a| &mut a.geo),
        Block::Fusion => params.attributes.as_mut().map(|a| &mut a.fusion),
    }
}

/// Accumulated `dL/dθ` for every block.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub click: RowGrad,
    pub output: RowGrad,
    pub amenity: Vec<f64>,
    pub geo: Vec<f64>,
    pub fusion: Vec<f64>,
}

impl Gradients {
    pub fn new(params: &ModelParams) -> Self {
        let d = params.dims;
        let h = params.hotels();
        let (a, g, f) = params.attributes.as_ref().map_or((0, 0, 0), |b| {
            (b.amenity.as_slice().len(), b.geo.as_slice().len(), b.fusion.as_slice().len())
        });
        Gradients {
            click: RowGrad::new(h, d.click),
            output: RowGrad::new(h, d.enriched),
            amenity: vec![0.0; a],
            geo: vec![0.0; g],
            fusion: vec![0.0; f],
        }
    }

    pub fn clear(&mut self) {
        self.click.clear();
        self.output.clear();
        self.amenity.fill(0.0);
        self.geo.fill(0.0);
        self.fusion.fill(0.0);
    }

    /// Gradient of the flat coordinate `index` (row-major) of `block`;
    /// untouched rows read as zero.
    pub fn get(&self, block: Block, index: usize) -> f64 {
        let sparse = |g: &RowGrad| {
            let r = index / g.width;
            g.row(r as u32).map_or(0.0, |row| row[index % g.width])
        };
        match block {
            Block::Click => sparse(&self.click),
            Block::Output => sparse(&self.output),
            Block::Amenity => self.amenity[index],
            Block::Geo => self.geo[index],
            Block::Fusion => self.fusion[index],
        }
    }
}

/// Output side of one pair: adds `dL/dV_e` into `grad_ve`, output-row
/// gradients into `grads`, and returns the pair loss.
fn output_step(
    ve: &[f64],
    context: u32,
    negatives: &[u32],
    params: &ModelParams,
    grads: &mut Gradients,
    grad_ve: &mut [f64],
) -> f64 {
    let mut loss = 0.0;
    let mut push = |row: u32, label: bool, loss: &mut f64| {
        let w = params.output.row(row as usize);
        let x = dot_f32(w, ve);
        let g = if label {
            *loss -= log_sigmoid(x);
            sigmoid(x) - 1.0
        } else {
            *loss -= log_sigmoid(-x);
            sigmoid(x)
        };
        if g == 0.0 {
            return;
        }
        for (gv, wv) in grad_ve.iter_mut().zip(w) {
            *gv += g * *wv as f64;
        }
        for (go, v) in grads.output.row_mut(row).iter_mut().zip(ve) {
            *go += g * v;
        }
    };
    push(context, true, &mut loss);
    for &n in negatives {
        push(n, false, &mut loss);
    }
    loss
}

/// Target side: back-propagates `grad_ve` through fusion and the facet
/// projections into the click row and the dense blocks.
fn target_backward(
    fwd: &HotelForward,
    target: u32,
    amenity_input: &[f64],
    geo_input: &[f64],
    params: &ModelParams,
    grad_ve: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dims;
    let Some(blocks) = &params.attributes else {
        let g = fwd.click.backward(grad_ve);
        for (a, b) in grads.click.row_mut(target).iter_mut().zip(&g) {
            *a += b;
        }
        return;
    };
    let gs: Vec<f64> = grad_ve
        .iter()
        .zip(&fwd.fused_pre)
        .map(|(g, s)| if *s > 0.0 { *g } else { 0.0 })
        .collect();
    if gs.iter().all(|&g| g == 0.0) {
        return;
    }
    let z = fwd.concat();
    for (zi, row) in z.iter().zip(grads.fusion.chunks_exact_mut(d.enriched)) {
        if *zi == 0.0 {
            continue;
        }
        for (r, g) in row.iter_mut().zip(&gs) {
            *r += zi * g;
        }
    }
    let gz = blocks.fusion.mul_vec(&gs);
    let (gc, rest) = gz.split_at(d.click);
    let (ga, gg) = rest.split_at(d.amenity);

    let g = fwd.click.backward(gc);
    for (a, b) in grads.click.row_mut(target).iter_mut().zip(&g) {
        *a += b;
    }
    let facets = [
        (fwd.amenity.as_ref(), ga, amenity_input, &mut grads.amenity, d.amenity),
        (fwd.geo.as_ref(), gg, geo_input, &mut grads.geo, d.geo),
    ];
    for (facet, g_out, input, acc, width) in facets {
        let Some(facet) = facet else { continue };
        let gy = facet.backward(g_out);
        for (xi, row) in input.iter().zip(acc.chunks_exact_mut(width)) {
            if *xi == 0.0 {
                continue;
            }
            for (r, g) in row.iter_mut().zip(&gy) {
                *r += xi * g;
            }
        }
    }
}

/// Loss of one `(target, context)` pair with the given negatives; adds the
/// exact gradients of every parameter into `grads`.
pub fn pair_loss(
    target: u32,
    context: u32,
    negatives: &[u32],
    features: &FeatureTable,
    params: &ModelParams,
    grads: &mut Gradients,
) -> Result<f64> {
    for &i in std::iter::once(&context).chain(negatives) {
        if i as usize >= params.hotels() {
            return Err(Error::IndexOutOfRange {
                index: i as usize,
                size: params.hotels(),
            });
        }
    }
    let (amenity, geo) = inputs(features, params, target);
    let fwd = forward(target, amenity, geo, params)?;
    let mut grad_ve = vec![0.0; params.dims.enriched];
    let loss = output_step(&fwd.enriched, context, negatives, params, grads, &mut grad_ve);
    if !loss.is_finite() || grad_ve.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: format!("pair ({target}, {context}) loss {loss}"),
        });
    }
    target_backward(&fwd, target, amenity, geo, params, &grad_ve, grads);
    Ok(loss)
}

fn inputs<'a>(features: &'a FeatureTable, params: &ModelParams, target: u32) -> (&'a [f64], &'a [f64]) {
    if params.attributes.is_some() {
        (features.amenity(target), features.geo(target))
    } else {
        (&[], &[])
    }
}

/// First and second moments for the adaptive optimizers.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn sized(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    blocks: Vec<Moments>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAPTIVE_EPS: f64 = 1e-8;

fn apply_update(
    kind: OptimizerKind,
    param: &mut [f32],
    grad: &[f64],
    scale: f64,
    lr: f64,
    step: u64,
    moments: Option<(&mut [f64], &mut [f64])>,
) {
    match (kind, moments) {
        (OptimizerKind::Sgd, _) | (_, None) => {
            for (p, g) in param.iter_mut().zip(grad) {
                *p = (*p as f64 - lr * scale * g) as f32;
            }
        }
        (OptimizerKind::Adagrad, Some((_, v))) => {
            for ((p, g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g * scale;
                *v += g * g;
                *p = (*p as f64 - lr * g / (v.sqrt() + ADAPTIVE_EPS)) as f32;
            }
        }
        (OptimizerKind::Adam, Some((m, v))) => {
            let t = step as i32 + 1;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p = (*p as f64 - lr * (*m / c1) / ((*v / c2).sqrt() + ADAPTIVE_EPS)) as f32;
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    /// Losses of the most recent steps (up to the divergence window).
    pub recent_losses: VecDeque<f64>,
    pub initial_loss: Option<f64>,
    pub best_validation: Option<f64>,
    pub best_step: Option<u64>,
    optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            params,
            step: 0,
            epoch: 0,
            recent_losses: VecDeque::new(),
            initial_loss: None,
            best_validation: None,
            best_step: None,
            optimizer: OptimizerState::default(),
        }
    }

    /// Mean of the recent step losses.
    pub fn running_loss(&self) -> Option<f64> {
        if self.recent_losses.is_empty() {
            None
        } else {
            Some(self.recent_losses.iter().sum::<f64>() / self.recent_losses.len() as f64)
        }
    }

    pub(crate) fn has_optimizer_moments(&self) -> bool {
        !self.optimizer.blocks.is_empty()
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean loss over the recent-loss window.
    pub loss: f64,
    pub val_hits10: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointReason {
    Cadence,
    /// Validation hits@10 improved on the best so far.
    Best,
    Final,
}

/// Hooks for logging and persistence during [`Trainer::run`].
pub trait TrainObserver {
    fn on_metric(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState, _reason: CheckpointReason) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Collects metric records in memory.
#[derive(Debug, Default)]
pub struct MetricCollector {
    pub records: Vec<MetricRecord>,
}

impl TrainObserver for MetricCollector {
    fn on_metric(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

struct CacheEntry {
    target: u32,
    fwd: HotelForward,
    grad_ve: Vec<f64>,
}

/// A configured training run over one corpus.
pub struct Trainer<'a> {
    config: TrainConfig,
    features: &'a FeatureTable,
    vocab: &'a Vocabulary,
    sampler: NegativeSampler,
    pairs: Vec<TrainingPair>,
    validation: Vec<TrainingPair>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        corpus: &SessionCorpus<u32>,
        features: &'a FeatureTable,
        vocab: &'a Vocabulary,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if features.len() != vocab.len() {
            return Err(Error::Shape(format!(
                "feature table has {} rows for {} hotels",
                features.len(),
                vocab.len()
            )));
        }
        let mut pairs = Vec::new();
        for s in &corpus.train {
            if let Some(&bad) = s.iter().find(|&&h| h as usize >= vocab.len()) {
                return Err(Error::IndexOutOfRange {
                    index: bad as usize,
                    size: vocab.len(),
                });
            }
            append_pairs(s, config.window, &mut pairs);
        }
        if pairs.is_empty() {
            return Err(Error::Invalid("training split yields no pairs".into()));
        }
        let sampler = NegativeSampler::new(vocab, config.alpha, config.negatives, config.sampler_seed)?;
        let validation = sample_pairs(&next_click_pairs(&corpus.validation), config.eval_pairs, config.shuffle_seed);
        Ok(Trainer {
            config,
            features,
            vocab,
            sampler,
            pairs,
            validation,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.pairs.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.steps_per_epoch() * self.config.epochs as u64;
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    /// Fresh state with seeded initial parameters.
    pub fn init_state(&self) -> Result<TrainState> {
        let params = ModelParams::init(
            self.config.mode,
            self.config.dims(),
            self.vocab.len(),
            self.features.amenity_width(),
            self.config.init_seed,
        )?;
        Ok(TrainState::new(params))
    }

    /// Validation filtered hits@10 for `params`, `None` without validation pairs.
    pub fn validation_hits(&self, params: &ModelParams) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let emb = EmbeddingSet::compute(params, self.features)?;
        let scorer = Scorer::ModelScore {
            params,
            embeddings: &emb,
        };
        Ok(Some(
            hits_at_k(&self.validation, &[10], Candidates::Filtered, &scorer, self.vocab)?.hit_rates[0],
        ))
    }

    fn epoch_order(&self, epoch: u64) -> Vec<u32> {
        let mut order: Vec<u32> = (0..self.pairs.len() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.shuffle_seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Runs (or continues) training until the step budget is spent.
    pub fn run(&self, state: &mut TrainState, observer: &mut dyn TrainObserver) -> Result<()> {
        let cfg = &self.config;
        if state.params.mode() != cfg.mode || state.params.hotels() != self.vocab.len() {
            return Err(Error::Config("state does not match the configured model".into()));
        }
        if cfg.optimizer != OptimizerKind::Sgd && state.step > 0 && !state.has_optimizer_moments() {
            return Err(Error::Config(
                "resuming an adaptive optimizer needs its moments; only sgd runs resume from checkpoints".into(),
            ));
        }
        if cfg.optimizer != OptimizerKind::Sgd && !state.has_optimizer_moments() {
            let p = &state.params;
            let mut sizes = vec![p.click.as_slice().len(), p.output.as_slice().len()];
            if let Some(a) = &p.attributes {
                sizes.extend([a.amenity.as_slice().len(), a.geo.as_slice().len(), a.fusion.as_slice().len()]);
            }
            state.optimizer.blocks = sizes.into_iter().map(Moments::sized).collect();
        }
        let start = Instant::now();
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let mut grads = Gradients::new(&state.params);
        let mut slot = vec![u32::MAX; self.vocab.len()];
        let mut cache: Vec<CacheEntry> = Vec::new();
        let mut negatives = Vec::with_capacity(cfg.negatives);
        let mut order_epoch = u64::MAX;
        let mut order = Vec::new();

        while state.step < total {
            let epoch = state.step / spe;
            if epoch != order_epoch {
                order = self.epoch_order(epoch);
                order_epoch = epoch;
            }
            state.epoch = epoch;
            let offset = (state.step % spe) as usize * cfg.batch_size;
            let batch = &order[offset..(offset + cfg.batch_size).min(order.len())];
            let mut rng = self.sampler.stream(state.step);

            let params = &state.params;
            let mut loss_sum = 0.0;
            for &pi in batch {
                let p = self.pairs[pi as usize];
                let s = match slot[p.target as usize] {
                    u32::MAX => {
                        let (a, g) = inputs(self.features, params, p.target);
                        cache.push(CacheEntry {
                            target: p.target,
                            fwd: forward(p.target, a, g, params)?,
                            grad_ve: vec![0.0; params.dims.enriched],
                        });
                        slot[p.target as usize] = (cache.len() - 1) as u32;
                        cache.len() - 1
                    }
                    s => s as usize,
                };
                let market = self.vocab.market_of(p.context);
                self.sampler.sample_into(&mut rng, p.target, p.context, market, &mut negatives);
                let e = &mut cache[s];
                loss_sum += output_step(&e.fwd.enriched, p.context, &negatives, params, &mut grads, &mut e.grad_ve);
            }
            for e in cache.drain(..) {
                let (a, g) = inputs(self.features, params, e.target);
                target_backward(&e.fwd, e.target, a, g, params, &e.grad_ve, &mut grads);
                slot[e.target as usize] = u32::MAX;
            }
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    what: format!("batch loss {loss}"),
                });
            }
            let lr = cfg.lr_at(state.step);
            self.apply(state, &grads, lr, 1.0 / batch.len() as f64);
            grads.clear();
            if !state.params.is_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    what: "parameters after update".into(),
                });
            }

            let initial = *state.initial_loss.get_or_insert(loss);
            state.recent_losses.push_back(loss);
            if state.recent_losses.len() > cfg.divergence_window {
                state.recent_losses.pop_front();
            }
            let window_loss = state.running_loss().unwrap_or(loss);
            if state.recent_losses.len() == cfg.divergence_window && window_loss > cfg.divergence_factor * initial {
                return Err(Error::Diverged {
                    step: state.step,
                    window_loss,
                    initial_loss: initial,
                });
            }
            state.step += 1;

            let done = state.step == total;
            let epoch_end = state.step % spe == 0 || done;
            let validate = if cfg.eval_every == 0 { epoch_end } else { state.step % cfg.eval_every == 0 || done };
            let log = validate || (cfg.log_every > 0 && state.step % cfg.log_every == 0) || epoch_end;
            let mut val = None;
            if validate {
                val = self.validation_hits(&state.params)?;
                if let Some(v) = val {
                    if state.best_validation.is_none_or(|b| v > b) {
                        state.best_validation = Some(v);
                        state.best_step = Some(state.step);
                        observer.on_checkpoint(state, CheckpointReason::Best)?;
                    }
                }
            }
            if log {
                observer.on_metric(&MetricRecord {
                    step: state.step,
                    epoch: state.step.saturating_sub(1) / spe,
                    lr,
                    loss: window_loss,
                    val_hits10: val,
                    wall_ms: start.elapsed().as_millis() as u64,
                })?;
            }
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && !done {
                observer.on_checkpoint(state, CheckpointReason::Cadence)?;
            }
        }
        state.epoch = state.step.div_ceil(spe.max(1));
        observer.on_checkpoint(state, CheckpointReason::Final)?;
        Ok(())
    }

    fn apply(&self, state: &mut TrainState, grads: &Gradients, lr: f64, scale: f64) {
        let kind = self.config.optimizer;
        let step = state.step;
        let params = &mut state.params;
        let mut moments = state.optimizer.blocks.iter_mut();
        let sparse = |m: &mut Matrix, g: &RowGrad, mom: Option<&mut Moments>| {
            let w = g.width;
            let mut mom = mom;
            for &r in g.touched() {
                let i = r as usize;
                let row = g.row(r).expect("touched row");
                let mv = mom.as_mut().map(|mo| (&mut mo.m[i * w..(i + 1) * w], &mut mo.v[i * w..(i + 1) * w]));
                apply_update(kind, m.row_mut(i), row, scale, lr, step, mv);
            }
        };
        sparse(&mut params.click, &grads.click, moments.next());
        sparse(&mut params.output, &grads.output, moments.next());
        if let Some(a) = &mut params.attributes {
            for (m, g) in [
                (&mut a.amenity, &grads.amenity),
                (&mut a.geo, &grads.geo),
                (&mut a.fusion, &grads.fusion),
            ] {
                let mv = moments.next().map(|mo| (&mut mo.m[..], &mut mo.v[..]));
                apply_update(kind, m.as_mut_slice(), g, scale, lr, step, mv);
            }
        }
    }
}

/// Trains from scratch with no observer.
pub fn train(
    corpus: &SessionCorpus<u32>,
    features: &FeatureTable,
    vocab: &Vocabulary,
    config: TrainConfig,
) -> Result<TrainState> {
    let trainer = Trainer::new(corpus, features, vocab, config)?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, &mut NoObserver)?;
    Ok(state)
}

/// Filtered hits@k (percent) on up to `max_pairs` sampled validation
/// next-click pairs.
pub fn evaluate_validation(
    params: &ModelParams,
    features: &FeatureTable,
    vocab: &Vocabulary,
    corpus: &SessionCorpus<u32>,
    k: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let pairs = sample_pairs(&next_click_pairs(&corpus.validation), max_pairs, seed);
    if pairs.is_empty() {
        return Err(Error::Invalid("validation split has no pairs".into()));
    }
    let emb = EmbeddingSet::compute(params, features)?;
    let scorer = Scorer::ModelScore {
        params,
        embeddings: &emb,
    };
    Ok(hits_at_k(&pairs, &[k], Candidates::Filtered, &scorer, vocab)?.hit_rates[0])
}
