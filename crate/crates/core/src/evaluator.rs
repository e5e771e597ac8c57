//! Evaluation: next-click hits@k (raw and same-market filtered, by model
//! score or cosine similarity), market similarity matrices, nearest
//! neighbours, analogies and the cold-start protocol.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::Vocabulary;
use crate::error::{Error, Result};
use crate::matrix::{cosine, dot, dot_f32, norm};
use crate::model::{EmbeddingSet, ModelParams, VectorKind};
use crate::sessions::TrainingPair;

/// Candidate set for next-click ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidates {
    /// Every hotel except the target.
    Raw,
    /// The target's market, minus the target.
    Filtered,
}

impl Candidates {
    pub fn as_str(self) -> &'static str {
        match self {
            Candidates::Raw => "raw",
            Candidates::Filtered => "filtered",
        }
    }
}

impl std::str::FromStr for Candidates {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Candidates::Raw),
            "filtered" => Ok(Candidates::Filtered),
            other => Err(Error::Config(format!("unknown candidate set `{other}`"))),
        }
    }
}

/// Scores a candidate hotel for a target hotel; higher ranks first.
pub enum Scorer<'a> {
    /// `V_e(target) · W_out[candidate]`, i.e. the context probability
    /// without the monotone `log σ`.
    ModelScore {
        params: &'a ModelParams,
        embeddings: &'a EmbeddingSet,
    },
    /// Cosine similarity of one vector block.
    Cosine {
        embeddings: &'a EmbeddingSet,
        kind: VectorKind,
    },
    Custom {
        name: &'a str,
        score: &'a dyn Fn(u32, u32) -> f64,
    },
}

impl Scorer<'_> {
    pub fn name(&self) -> String {
        match self {
            Scorer::ModelScore { .. } => "model_score".into(),
            Scorer::Cosine { kind, .. } => format!("cosine_{kind}"),
            Scorer::Custom { name, .. } => name.to_string(),
        }
    }

    fn prepare(&self) -> PreparedScorer<'_> {
        match self {
            Scorer::ModelScore { params, embeddings } => PreparedScorer::Model { params, embeddings },
            Scorer::Cosine { embeddings, kind } => {
                let width = embeddings.width(*kind);
                let mut unit = embeddings.matrix(*kind);
                for row in unit.chunks_mut(width.max(1)) {
                    let n = norm(row);
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
                PreparedScorer::Unit { unit, width }
            }
            Scorer::Custom { score, .. } => PreparedScorer::Custom(*score),
        }
    }
}

enum PreparedScorer<'a> {
    Model {
        params: &'a ModelParams,
        embeddings: &'a EmbeddingSet,
    },
    Unit {
        unit: Vec<f64>,
        width: usize,
    },
    Custom(&'a dyn Fn(u32, u32) -> f64),
}

impl PreparedScorer<'_> {
    /// Scores of `candidates` for `target`.
    fn scores(&self, target: u32, candidates: &[u32], out: &mut Vec<f64>) {
        out.clear();
        match self {
            PreparedScorer::Model { params, embeddings } => {
                let ve = embeddings.enriched(target);
                out.extend(candidates.iter().map(|&c| dot_f32(params.output.row(c as usize), ve)));
            }
            PreparedScorer::Unit { unit, width } => {
                let w = *width;
                let t = target as usize;
                let tv = &unit[t * w..(t + 1) * w];
                out.extend(candidates.iter().map(|&c| {
                    let c = c as usize;
                    dot(tv, &unit[c * w..(c + 1) * w])
                }));
            }
            PreparedScorer::Custom(f) => out.extend(candidates.iter().map(|&c| f(target, c))),
        }
    }
}

/// Hit rates for one task. Rates are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub ks: Vec<usize>,
    pub hit_rates: Vec<f64>,
    pub candidates: Candidates,
    pub vector_kind: String,
    /// Pairs that contributed to the rates.
    pub pairs: usize,
    /// Pairs dropped because the candidate set was empty.
    pub skipped: usize,
    pub config_hash: String,
    pub timestamp: String,
}

impl EvalReport {
    pub fn rate(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hit_rates[i])
    }

    pub const CSV_HEADER: &'static str = "task,candidates,vector,k,hit_rate,pairs,skipped,config_hash";

    pub fn csv_rows(&self) -> Vec<String> {
        self.ks
            .iter()
            .zip(&self.hit_rates)
            .map(|(k, r)| {
                format!(
                    "{},{},{},{},{:.4},{},{},{}",
                    self.task,
                    self.candidates.as_str(),
                    self.vector_kind,
                    k,
                    r,
                    self.pairs,
                    self.skipped,
                    self.config_hash
                )
            })
            .collect()
    }
}

/// Renders reports as CSV with a header row.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Renders reports as an aligned text table, one row per report.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.ks.iter().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    let label = |r: &EvalReport| format!("{} [{}, {}]", r.task, r.candidates.as_str(), r.vector_kind);
    let width = reports.iter().map(|r| label(r).len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "task");
    for k in &ks {
        let _ = write!(out, " {:>9}", format!("hits@{k}"));
    }
    let _ = writeln!(out, " {:>8} {:>8}", "pairs", "skipped");
    for r in reports {
        let _ = write!(out, "{:<width$}", label(r));
        for k in &ks {
            match r.rate(*k) {
                Some(v) => {
                    let _ = write!(out, " {v:>9.2}");
                }
                None => {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>8} {:>8}", r.pairs, r.skipped);
    }
    out
}

/// Position of `truth` when `candidates` are sorted by descending score,
/// ties broken by ascending hotel index. `None` when `truth` is absent.
fn rank_of(truth: u32, candidates: &[u32], scores: &[f64]) -> Option<usize> {
    let pos = candidates.iter().position(|&c| c == truth)?;
    let s = scores[pos];
    Some(
        candidates
            .iter()
            .zip(scores)
            .filter(|&(&c, &v)| v > s || (v == s && c < truth))
            .count(),
    )
}

/// Candidates for `target`, in ascending index order.
fn candidate_set(target: u32, mode: Candidates, vocab: &Vocabulary, members: &[Vec<u32>]) -> Vec<u32> {
    match mode {
        Candidates::Raw => (0..vocab.len() as u32).filter(|&c| c != target).collect(),
        Candidates::Filtered => members[vocab.market_of(target) as usize]
            .iter()
            .copied()
            .filter(|&c| c != target)
            .collect(),
    }
}

/// Ranks `candidates` for `target` by score, best first; ties by index.
pub fn rank_candidates(target: u32, candidates: &[u32], scorer: &Scorer) -> Vec<(u32, f64)> {
    let prepared = scorer.prepare();
    let mut scores = Vec::new();
    prepared.scores(target, candidates, &mut scores);
    let mut ranked: Vec<(u32, f64)> = candidates.iter().copied().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Next-click hits@k: a pair is a hit at `k` when the true next hotel ranks
/// within the top `k` candidates for the target.
pub fn hits_at_k(
    pairs: &[TrainingPair],
    ks: &[usize],
    candidates: Candidates,
    scorer: &Scorer,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k values must be positive".into()));
    }
    let members = vocab.market_members();
    let prepared = scorer.prepare();
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut scores = Vec::new();
    let mut raw_cache: Option<Vec<u32>> = None;
    for p in pairs {
        for idx in [p.target, p.context] {
            if idx as usize >= vocab.len() {
                return Err(Error::IndexOutOfRange {
                    index: idx as usize,
                    size: vocab.len(),
                });
            }
        }
        let cands: Vec<u32> = match candidates {
            Candidates::Raw => {
                // all-but-target, built once and patched per pair
                let all = raw_cache.get_or_insert_with(|| (0..vocab.len() as u32).collect());
                all.iter().copied().filter(|&c| c != p.target).collect()
            }
            Candidates::Filtered => candidate_set(p.target, candidates, vocab, &members),
        };
        if cands.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        prepared.scores(p.target, &cands, &mut scores);
        if let Some(rank) = rank_of(p.context, &cands, &scores) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let hit_rates = hits
        .iter()
        .map(|&h| if evaluated == 0 { 0.0 } else { 100.0 * h as f64 / evaluated as f64 })
        .collect();
    Ok(EvalReport {
        task: "hits".into(),
        ks: ks.to_vec(),
        hit_rates,
        candidates,
        vector_kind: scorer.name(),
        pairs: evaluated,
        skipped,
        config_hash: String::new(),
        timestamp: String::new(),
    })
}

/// Mean pairwise cosine similarities between markets.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSimilarityMatrix {
    pub markets: Vec<String>,
    /// Row-major `markets.len()` squared.
    pub values: Vec<f64>,
}

impl MarketSimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.markets.len() + j]
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.markets.len();
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.markets.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        total / (n * (n - 1)) as f64
    }

    /// `mean(diagonal) - mean(off-diagonal)`.
    pub fn separation(&self) -> f64 {
        self.mean_diagonal() - self.mean_off_diagonal()
    }

    pub fn to_csv(&self) -> String {
        let n = self.markets.len();
        let mut out = String::from("market");
        for m in &self.markets {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.markets[i]);
            for j in 0..n {
                let _ = write!(out, ",{:.6}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

pub const MARKET_SAMPLE_SIZE: usize = 200;

/// Entry `(i, j)` is the mean cosine over hotel pairs drawn from markets `i`
/// and `j` (up to `sample_size` hotels per market, sampled with `seed`);
/// diagonal entries exclude self-pairs.
pub fn market_similarity(
    embeddings: &EmbeddingSet,
    vocab: &Vocabulary,
    markets: &[u32],
    kind: VectorKind,
    sample_size: usize,
    seed: u64,
) -> Result<MarketSimilarityMatrix> {
    let members = vocab.market_members();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Vec<Vec<f64>>> = Vec::with_capacity(markets.len());
    for &m in markets {
        let list = members
            .get(m as usize)
            .ok_or_else(|| Error::Invalid(format!("market index {m} out of range")))?;
        if list.len() < 2 {
            return Err(Error::Invalid(format!(
                "market `{}` has fewer than 2 hotels",
                vocab.markets()[m as usize]
            )));
        }
        let mut chosen = list.clone();
        if chosen.len() > sample_size {
            chosen.shuffle(&mut rng);
            chosen.truncate(sample_size);
            chosen.sort_unstable();
        }
        samples.push(chosen.iter().map(|&h| embeddings.vector(kind, h)).collect());
    }
    let n = markets.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut total = 0.0;
            let mut count = 0usize;
            for (a, va) in samples[i].iter().enumerate() {
                for (b, vb) in samples[j].iter().enumerate() {
                    if i == j && a == b {
                        continue;
                    }
                    total += cosine(va, vb);
                    count += 1;
                }
            }
            let mean = total / count as f64;
            values[i * n + j] = mean;
            values[j * n + i] = mean;
        }
    }
    Ok(MarketSimilarityMatrix {
        markets: markets.iter().map(|&m| vocab.markets()[m as usize].clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    /// Only hotels in the query's market.
    Market,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "market" => Ok(Scope::Market),
            other => Err(Error::Config(format!("unknown scope `{other}`"))),
        }
    }
}

/// Top `k` hotels by cosine similarity to `hotel_id`, query excluded.
pub fn most_similar(
    hotel_id: &str,
    k: usize,
    scope: Scope,
    kind: VectorKind,
    embeddings: &EmbeddingSet,
    vocab: &Vocabulary,
) -> Result<Vec<(String, f64)>> {
    let q = vocab.require(hotel_id)?;
    let query = embeddings.vector(kind, q);
    let pool: Vec<u32> = match scope {
        Scope::All => (0..vocab.len() as u32).filter(|&c| c != q).collect(),
        Scope::Market => (0..vocab.len() as u32)
            .filter(|&c| c != q && vocab.market_of(c) == vocab.market_of(q))
            .collect(),
    };
    Ok(top_by_cosine(&query, &pool, k, kind, embeddings)
        .into_iter()
        .map(|(i, s)| (vocab.id(i).to_string(), s))
        .collect())
}

fn top_by_cosine(query: &[f64], pool: &[u32], k: usize, kind: VectorKind, embeddings: &EmbeddingSet) -> Vec<(u32, f64)> {
    let mut scored: Vec<(u32, f64)> = pool
        .iter()
        .map(|&c| (c, cosine(query, &embeddings.vector(kind, c))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// "h1 is to h2 as h3 is to x": hotels ranked by cosine to
/// `V_e1 - V_e2 + V_e3`, excluding the three query hotels.
pub fn analogy(
    h1: &str,
    h2: &str,
    h3: &str,
    k: usize,
    embeddings: &EmbeddingSet,
    vocab: &Vocabulary,
) -> Result<Vec<(String, f64)>> {
    analogy_with(h1, h2, h3, k, VectorKind::Enriched, embeddings, vocab)
}

pub fn analogy_with(
    h1: &str,
    h2: &str,
    h3: &str,
    k: usize,
    kind: VectorKind,
    embeddings: &EmbeddingSet,
    vocab: &Vocabulary,
) -> Result<Vec<(String, f64)>> {
    let idx = [vocab.require(h1)?, vocab.require(h2)?, vocab.require(h3)?];
    let (a, b, c) = (
        embeddings.vector(kind, idx[0]),
        embeddings.vector(kind, idx[1]),
        embeddings.vector(kind, idx[2]),
    );
    let query: Vec<f64> = a.iter().zip(&b).zip(&c).map(|((x, y), z)| x - y + z).collect();
    if norm(&query) <= 1e-12 {
        return Err(Error::Invalid("analogy query vector is zero".into()));
    }
    let excluded: HashSet<u32> = idx.into_iter().collect();
    let pool: Vec<u32> = (0..vocab.len() as u32).filter(|c| !excluded.contains(c)).collect();
    Ok(top_by_cosine(&query, &pool, k, kind, embeddings)
        .into_iter()
        .map(|(i, s)| (vocab.id(i).to_string(), s))
        .collect())
}

/// One model variant in the cold-start comparison.
pub struct ColdStartVariant<'a> {
    pub name: &'a str,
    pub params: &'a ModelParams,
    pub embeddings: &'a EmbeddingSet,
}

/// Filtered hits@k with held-out hotels as targets, for each variant.
///
/// `train` must not mention any held-out hotel; `eval_pairs` are next-click
/// pairs, of which those whose target is held out are scored.
pub fn cold_start_eval(
    held_out: &[u32],
    train: &[Vec<u32>],
    eval_pairs: &[TrainingPair],
    ks: &[usize],
    variants: &[ColdStartVariant],
    vocab: &Vocabulary,
) -> Result<Vec<EvalReport>> {
    let held: HashSet<u32> = held_out.iter().copied().collect();
    if let Some(&h) = train.iter().flatten().find(|h| held.contains(h)) {
        return Err(Error::Protocol(format!(
            "held-out hotel `{}` appears in the training sessions",
            vocab.id(h)
        )));
    }
    let pairs: Vec<TrainingPair> = eval_pairs.iter().copied().filter(|p| held.contains(&p.target)).collect();
    variants
        .iter()
        .map(|v| {
            let scorer = Scorer::ModelScore {
                params: v.params,
                embeddings: v.embeddings,
            };
            let mut report = hits_at_k(&pairs, ks, Candidates::Filtered, &scorer, vocab)?;
            report.task = format!("cold_start_{}", v.name);
            Ok(report)
        })
        .collect()
}

/// Up to `max_pairs` pairs sampled without replacement, in a seeded order.
pub fn sample_pairs(pairs: &[TrainingPair], max_pairs: usize, seed: u64) -> Vec<TrainingPair> {
    if pairs.len() <= max_pairs {
        return pairs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(max_pairs);
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i]).collect()
}
