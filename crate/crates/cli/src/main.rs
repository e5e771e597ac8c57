mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enrichvec::Error;
use serde::Serialize;

/// Hotel embeddings from click sessions and catalog attributes.
#[derive(Parser)]
#[command(name = "enrichvec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic clustered fixture (clicks, catalog, schema).
    GenSynthetic(GenSyntheticArgs),
    /// Sessionize and split a click log and build the vocabulary.
    Ingest(IngestArgs),
    /// Train a model on an ingested corpus.
    Train(TrainArgs),
    /// Hits@k or market similarity for a checkpoint.
    Eval(EvalArgs),
    /// Nearest hotels by cosine similarity.
    Similar(SimilarArgs),
    /// "h1 is to h2 as h3 is to ?" over enriched vectors.
    Analogy(AnalogyArgs),
    /// Fill the click rows of cold-start hotels from similar trained hotels.
    Impute(ImputeArgs),
    /// Write embeddings as TSV.
    Export(ExportArgs),
}

#[derive(Args, Serialize)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub hotels: usize,
    #[arg(long, default_value_t = 25)]
    pub markets: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 50_000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub p_market: f64,
    #[arg(long, default_value_t = 0.7)]
    pub p_cluster: f64,
}

#[derive(Args, Serialize)]
pub struct IngestArgs {
    /// Click log CSV (user_id, hotel_id, timestamp).
    #[arg(long)]
    pub clicks: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inactivity gap that closes a session.
    #[arg(long, default_value_t = enrichvec::dataset::DEFAULT_GAP_DAYS)]
    pub gap_days: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = enrichvec::dataset::DEFAULT_SPLIT)]
    pub split: Vec<f64>,
    /// File of hotel ids (one per line) to keep out of training sessions.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Window used for the pair count in the summary.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
}

#[derive(Args, Serialize, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub click_dim: Option<usize>,
    #[arg(long)]
    pub amenity_dim: Option<usize>,
    #[arg(long)]
    pub geo_dim: Option<usize>,
    #[arg(long)]
    pub enriched_dim: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub decay_rate: Option<f64>,
    #[arg(long)]
    pub decay_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub sampler_seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_pairs: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub divergence_window: Option<usize>,
    #[arg(long)]
    pub divergence_factor: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `ingest` (catalog, schema and sessions).
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `hits` or `market-sim`.
    #[arg(long, default_value = "hits")]
    pub task: String,
    /// `raw` or `filtered`.
    #[arg(long, default_value = "filtered")]
    pub candidates: String,
    /// `model` (dot with the output table) or `cosine`.
    #[arg(long, default_value = "model")]
    pub scorer: String,
    /// Vector block for cosine scoring and market similarity.
    #[arg(long, default_value = "enriched")]
    pub vector: String,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20])]
    pub k: Vec<usize>,
    /// `test` or `validation`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Cap on scored pairs, 0 for all.
    #[arg(long, default_value_t = 0)]
    pub max_pairs: usize,
    /// Hotels sampled per market for market similarity.
    #[arg(long, default_value_t = enrichvec::evaluator::MARKET_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV (or similarity matrix CSV).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SimilarArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub hotel: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// `all` or `market`.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value = "enriched")]
    pub vector: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AnalogyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    pub h1: String,
    pub h2: String,
    pub h3: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Updated checkpoint.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// CSV audit log (target, pool size, fallback).
    #[arg(long)]
    #[serde(skip)]
    pub audit: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub radius_km: f64,
    #[arg(long, default_value_t = 100)]
    pub pool_size: usize,
    /// Attribute weights as `name=weight`; replaces the default set.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<String>,
}

#[derive(Args, Serialize)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Extra blocks after the enriched vector: click, amenity, geo, concatenated.
    #[arg(long, value_delimiter = ',')]
    pub extra: Vec<String>,
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 usage, 3 data validation, 4 numeric divergence, 1 anything else.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(e) if e.is_io() => 1,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Similar(a) => commands::similar(&a),
        Command::Analogy(a) => commands::analogy(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Export(a) => commands::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
