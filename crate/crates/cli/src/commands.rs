use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use enrichvec::catalog::{load_catalog, write_catalog, FeatureSchema, FeatureTable, HotelRecord};
use enrichvec::checkpoint::{Checkpoint, TrainingProgress};
use enrichvec::coldstart::{audit_csv, impute_cold_start, Fallback, ImputationPolicy};
use enrichvec::dataset::{Dataset, DatasetOptions};
use enrichvec::evaluator::{
    analogy as run_analogy, hits_at_k, market_similarity, most_similar, reports_to_csv, reports_to_table, sample_pairs,
    Candidates, Scope, Scorer,
};
use enrichvec::export::write_embeddings;
use enrichvec::model::{EmbeddingSet, Mode, VectorKind};
use enrichvec::sessions::{generate_pairs, load_click_log, next_click_pairs, write_click_log};
use enrichvec::store::{write_atomic, CorpusFile};
use enrichvec::synthetic::{generate, SyntheticConfig};
use enrichvec::trainer::{CheckpointReason, MetricRecord, OptimizerKind, TrainConfig, TrainObserver, TrainState, Trainer};
use enrichvec::Error;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    AnalogyArgs, CliError, EvalArgs, ExportArgs, GenSyntheticArgs, ImputeArgs, IngestArgs, ModelArgs, SimilarArgs,
    TrainArgs, TrainOverrides,
};

type CmdResult = std::result::Result<(), CliError>;

pub const CORPUS_FILE: &str = "corpus.bin";
pub const CATALOG_FILE: &str = "catalog.csv";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const CLICKS_FILE: &str = "clicks.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Manifest path for a single-file output: `report.csv` -> `report.csv.manifest.json`.
fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn gen_synthetic(args: &GenSyntheticArgs) -> CmdResult {
    let mut manifest = RunManifest::start("gen-synthetic", args);
    let config = SyntheticConfig {
        hotels: args.hotels,
        markets: args.markets,
        clusters: args.clusters,
        sessions: args.sessions,
        seed: args.seed,
        p_market: args.p_market,
        p_cluster: args.p_cluster,
        ..SyntheticConfig::default()
    };
    let data = generate(&config)?;
    create_dir(&args.out)?;

    let mut clicks = Vec::new();
    write_click_log(&mut clicks, &data.events)?;
    let mut catalog = Vec::new();
    write_catalog(&mut catalog, &data.catalog, &data.schema)?;
    for (name, bytes) in [
        (CLICKS_FILE, clicks),
        (CATALOG_FILE, catalog),
        (SCHEMA_FILE, data.schema.to_toml().into_bytes()),
    ] {
        let path = args.out.join(name);
        write_atomic(&path, &bytes)?;
        manifest.artifact(name, &path);
    }
    manifest.seed("generator", args.seed);
    manifest.summary = json!({
        "hotels": data.catalog.len(),
        "markets": config.markets,
        "clicks": data.events.len(),
        "sessions": config.sessions,
    });
    println!(
        "wrote {} hotels in {} markets, {} clicks over {} sessions to {}",
        data.catalog.len(),
        config.markets,
        data.events.len(),
        config.sessions,
        args.out.display()
    );
    manifest.finish(&args.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Vec<String>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn ingest(args: &IngestArgs) -> CmdResult {
    for (p, what) in [(&args.clicks, "click log"), (&args.catalog, "catalog"), (&args.schema, "schema")] {
        require_file(p, what)?;
    }
    let mut manifest = RunManifest::start("ingest", args);
    manifest.input("clicks", &args.clicks)?;
    manifest.input("catalog", &args.catalog)?;
    manifest.input("schema", &args.schema)?;

    let schema = FeatureSchema::load(&args.schema)?;
    let catalog = load_catalog(&args.catalog, &schema)?;
    let events = load_click_log(&args.clicks)?;
    if events.is_empty() {
        eprintln!("warning: click log `{}` has no clicks; the corpus is empty", args.clicks.display());
    }
    let mut options = DatasetOptions {
        gap_days: args.gap_days,
        ratios: [args.split[0], args.split[1], args.split[2]],
        split_seed: args.split_seed,
        ..DatasetOptions::default()
    };
    if let Some(p) = &args.held_out {
        require_file(p, "held-out list")?;
        manifest.input("held_out", p)?;
        options.held_out = read_id_list(p)?;
    }
    let ds = Dataset::build(&catalog, &schema, &events, &options)?;

    create_dir(&args.out)?;
    let corpus_path = args.out.join(CORPUS_FILE);
    CorpusFile {
        corpus: ds.corpus.clone(),
        vocab: ds.vocab.clone(),
    }
    .save(&corpus_path)?;
    let mut catalog_bytes = Vec::new();
    write_catalog(&mut catalog_bytes, &catalog, &schema)?;
    let catalog_path = args.out.join(CATALOG_FILE);
    write_atomic(&catalog_path, &catalog_bytes)?;
    let schema_path = args.out.join(SCHEMA_FILE);
    write_atomic(&schema_path, schema.to_toml().as_bytes())?;
    manifest.artifact("corpus", &corpus_path);
    manifest.artifact("catalog", &catalog_path);
    manifest.artifact("schema", &schema_path);
    manifest.seed("split", args.split_seed);

    let c = &ds.corpus;
    let pairs: usize = c.train.iter().map(|s| generate_pairs(s, args.window).len()).sum();
    let summary = json!({
        "clicks": events.len(),
        "sessions": c.session_count(),
        "train_sessions": c.train.len(),
        "validation_sessions": c.validation.len(),
        "test_sessions": c.test.len(),
        "pairs": pairs,
        "hotels": ds.vocab.len(),
        "markets": ds.vocab.markets().len(),
        "cold_start": ds.vocab.cold_start_count(),
    });
    println!("clicks: {}", events.len());
    println!(
        "sessions: {} (train {}, validation {}, test {})",
        c.session_count(),
        c.train.len(),
        c.validation.len(),
        c.test.len()
    );
    println!("pairs: {pairs} (window {})", args.window);
    println!("hotels: {}", ds.vocab.len());
    println!("markets: {}", ds.vocab.markets().len());
    println!("cold_start: {}", ds.vocab.cold_start_count());
    manifest.summary = summary;
    manifest.finish(&args.out.join(MANIFEST_FILE))?;
    Ok(())
}

/// An ingested corpus directory.
struct CorpusDir {
    corpus: CorpusFile,
    catalog: Vec<HotelRecord>,
    schema: FeatureSchema,
}

fn load_corpus_dir(dir: &Path, manifest: &mut RunManifest) -> Result<CorpusDir, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("corpus directory `{}` does not exist", dir.display())));
    }
    let files = [CORPUS_FILE, CATALOG_FILE, SCHEMA_FILE].map(|f| dir.join(f));
    for f in &files {
        require_file(f, "corpus file")?;
    }
    manifest.input("corpus", &files[0])?;
    manifest.input("catalog", &files[1])?;
    manifest.input("schema", &files[2])?;
    let schema = FeatureSchema::load(&files[2])?;
    Ok(CorpusDir {
        corpus: CorpusFile::load(&files[0])?,
        catalog: load_catalog(&files[1], &schema)?,
        schema,
    })
}

fn apply_overrides(mut c: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig, Error> {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = o.$field { c.$field = v; })*
        };
    }
    set!(
        click_dim,
        amenity_dim,
        geo_dim,
        enriched_dim,
        decay_rate,
        decay_steps,
        batch_size,
        epochs,
        window,
        negatives,
        alpha,
        init_seed,
        shuffle_seed,
        sampler_seed,
        checkpoint_every,
        log_every,
        eval_every,
        eval_pairs,
        divergence_window,
        divergence_factor
    );
    if let Some(m) = &o.mode {
        c.mode = Mode::from_str(m)?;
    }
    if let Some(lr) = o.learning_rate {
        c.learning_rate = Some(lr);
    }
    if let Some(s) = o.max_steps {
        c.max_steps = Some(s);
    }
    if let Some(opt) = &o.optimizer {
        c.optimizer = OptimizerKind::from_str(opt)?;
    }
    c.validate()?;
    Ok(c)
}

/// Writes checkpoints and appends metric records as training runs.
struct RunFiles<'a> {
    dir: &'a Path,
    metrics: File,
    config: String,
    vocab: &'a enrichvec::catalog::Vocabulary,
    written: Vec<(String, PathBuf)>,
}

impl TrainObserver for RunFiles<'_> {
    fn on_metric(&mut self, record: &MetricRecord) -> enrichvec::Result<()> {
        let mut line = serde_json::to_string(record).expect("metric serializes");
        line.push('\n');
        self.metrics
            .write_all(line.as_bytes())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }

    fn on_checkpoint(&mut self, state: &TrainState, reason: CheckpointReason) -> enrichvec::Result<()> {
        let (name, file) = match reason {
            CheckpointReason::Cadence => ("cadence".to_string(), format!("step-{:08}.bin", state.step)),
            CheckpointReason::Best => ("best".to_string(), "best.bin".to_string()),
            CheckpointReason::Final => ("final".to_string(), "final.bin".to_string()),
        };
        let path = self.dir.join(&file);
        Checkpoint {
            params: state.params.clone(),
            vocab: self.vocab.clone(),
            progress: Some(TrainingProgress::of(state, &self.config)),
        }
        .save(&path)?;
        let key = if name == "cadence" { file } else { name };
        self.written.retain(|(k, _)| *k != key);
        self.written.push((key, path));
        Ok(())
    }
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut manifest = RunManifest::start("train", args);
    let dir = load_corpus_dir(&args.corpus, &mut manifest)?;
    let base = match &args.config {
        Some(p) => {
            require_file(p, "config file")?;
            manifest.input("config", p)?;
            Some(TrainConfig::load(p)?)
        }
        None => None,
    };
    let resumed = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            manifest.input("resume", p)?;
            let ckpt = Checkpoint::load(p)?;
            let progress = ckpt
                .progress
                .clone()
                .ok_or_else(|| CliError::Usage(format!("checkpoint `{}` has no training progress", p.display())))?;
            if ckpt.vocab.ids() != dir.corpus.vocab.ids() {
                return Err(Error::Shape("checkpoint vocabulary differs from the corpus".into()).into());
            }
            Some((ckpt, progress))
        }
        None => None,
    };
    // file < resumed run's own config < flags
    let base = match (base, &resumed) {
        (Some(c), _) => c,
        (None, Some((_, p))) => TrainConfig::parse(&p.config)?,
        (None, None) => TrainConfig::default(),
    };
    let config = apply_overrides(base, &args.overrides)?;
    let config_toml = config.to_toml();

    let vocab = &dir.corpus.vocab;
    let features = FeatureTable::build(&dir.catalog, &dir.schema, vocab)?;
    let trainer = Trainer::new(&dir.corpus.corpus, &features, vocab, config.clone())?;
    let mut state = match resumed {
        Some((ckpt, progress)) => progress.into_state(ckpt.params),
        None => trainer.init_state()?,
    };

    create_dir(&args.out)?;
    let config_path = args.out.join("config.toml");
    write_atomic(&config_path, config_toml.as_bytes())?;
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    manifest.config_hash = config.hash();
    manifest.config = serde_json::to_value(&config).expect("config serializes");
    for (name, seed) in [
        ("init", config.init_seed),
        ("shuffle", config.shuffle_seed),
        ("sampler", config.sampler_seed),
        ("split", dir.corpus.corpus.split_seed),
    ] {
        manifest.seed(name, seed);
    }
    manifest.artifact("config", &config_path);
    manifest.artifact("metrics", &metrics_path);

    let start_step = state.step;
    let mut files = RunFiles {
        dir: &args.out,
        metrics,
        config: config_toml,
        vocab,
        written: Vec::new(),
    };
    let outcome = trainer.run(&mut state, &mut files);
    for (k, p) in &files.written {
        manifest.artifact(k, p);
    }
    outcome?;

    manifest.summary = json!({
        "mode": config.mode.to_string(),
        "start_step": start_step,
        "steps": state.step,
        "total_steps": trainer.total_steps(),
        "loss": state.running_loss(),
        "best_validation_hits10": state.best_validation,
        "best_step": state.best_step,
        "parameters": state.params.parameter_count(),
    });
    println!(
        "{} model: steps {}..{} of {}, loss {}, best validation hits@10 {}",
        config.mode,
        start_step,
        state.step,
        trainer.total_steps(),
        state.running_loss().map_or("n/a".into(), |l| format!("{l:.4}")),
        state.best_validation.map_or("n/a".into(), |v| format!("{v:.2}"))
    );
    manifest.finish(&args.out.join(MANIFEST_FILE))?;
    Ok(())
}

struct Model {
    ckpt: Checkpoint,
    dir: CorpusDir,
    features: FeatureTable,
}

impl Model {
    fn embeddings(&self) -> Result<EmbeddingSet, Error> {
        EmbeddingSet::compute(&self.ckpt.params, &self.features)
    }
}

fn load_model(args: &ModelArgs, manifest: &mut RunManifest) -> Result<Model, CliError> {
    let dir = load_corpus_dir(&args.corpus, manifest)?;
    require_file(&args.checkpoint, "checkpoint")?;
    manifest.input("checkpoint", &args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if ckpt.vocab.ids() != dir.corpus.vocab.ids() {
        return Err(Error::Shape("checkpoint vocabulary differs from the corpus".into()).into());
    }
    let features = FeatureTable::build(&dir.catalog, &dir.schema, &ckpt.vocab)?;
    Ok(Model { ckpt, dir, features })
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let mut manifest = RunManifest::start("eval", args);
    let model = load_model(&args.model, &mut manifest)?;
    let kind = VectorKind::from_str(&args.vector)?;
    let emb = model.embeddings()?;
    let vocab = &model.ckpt.vocab;
    let (text, table) = match args.task.as_str() {
        "hits" => {
            let candidates = Candidates::from_str(&args.candidates)?;
            let sessions = match args.split.as_str() {
                "test" => &model.dir.corpus.corpus.test,
                "validation" => &model.dir.corpus.corpus.validation,
                other => return Err(CliError::Usage(format!("unknown split `{other}`"))),
            };
            let cap = if args.max_pairs == 0 { usize::MAX } else { args.max_pairs };
            let pairs = sample_pairs(&next_click_pairs(sessions), cap, args.seed);
            let scorer = match args.scorer.as_str() {
                "model" => Scorer::ModelScore {
                    params: &model.ckpt.params,
                    embeddings: &emb,
                },
                "cosine" => Scorer::Cosine { embeddings: &emb, kind },
                other => return Err(CliError::Usage(format!("unknown scorer `{other}`"))),
            };
            let mut report = hits_at_k(&pairs, &args.k, candidates, &scorer, vocab)?;
            report.task = format!("hits_{}", args.split);
            report.config_hash = manifest.config_hash.clone();
            manifest.summary = json!({
                "pairs": report.pairs,
                "skipped": report.skipped,
                "hit_rates": report.ks.iter().zip(&report.hit_rates).map(|(k, r)| json!({"k": k, "rate": r})).collect::<Vec<_>>(),
            });
            let reports = [report];
            (reports_to_csv(&reports), reports_to_table(&reports))
        }
        "market-sim" => {
            let markets: Vec<u32> = (0..vocab.markets().len() as u32).collect();
            let sim = market_similarity(&emb, vocab, &markets, kind, args.sample_size, args.seed)?;
            manifest.summary = json!({
                "mean_diagonal": sim.mean_diagonal(),
                "mean_off_diagonal": sim.mean_off_diagonal(),
                "separation": sim.separation(),
            });
            let table = format!(
                "{kind} market similarity: mean diagonal {:.4}, mean off-diagonal {:.4}, separation {:.4}\n",
                sim.mean_diagonal(),
                sim.mean_off_diagonal(),
                sim.separation()
            );
            (sim.to_csv(), table)
        }
        other => return Err(CliError::Usage(format!("unknown task `{other}`"))),
    };
    print!("{table}");
    manifest.seed("eval", args.seed);
    if let Some(out) = &args.out {
        write_atomic(out, text.as_bytes())?;
        manifest.artifact("report", out);
        manifest.finish(&manifest_beside(out))?;
    }
    Ok(())
}

fn ranked_output(rows: &[(String, f64)], out: Option<&Path>, manifest: RunManifest) -> CmdResult {
    let mut csv = String::from("rank,hotel_id,cosine\n");
    for (i, (id, s)) in rows.iter().enumerate() {
        println!("{:>3}  {id:<16} {s:.6}", i + 1);
        csv.push_str(&format!("{},{id},{s}\n", i + 1));
    }
    if let Some(out) = out {
        let mut manifest = manifest;
        write_atomic(out, csv.as_bytes())?;
        manifest.artifact("ranking", out);
        manifest.finish(&manifest_beside(out))?;
    }
    Ok(())
}

pub fn similar(args: &SimilarArgs) -> CmdResult {
    let mut manifest = RunManifest::start("similar", args);
    let model = load_model(&args.model, &mut manifest)?;
    let scope = Scope::from_str(&args.scope)?;
    let kind = VectorKind::from_str(&args.vector)?;
    let rows = most_similar(&args.hotel, args.k, scope, kind, &model.embeddings()?, &model.ckpt.vocab)?;
    ranked_output(&rows, args.out.as_deref(), manifest)
}

pub fn analogy(args: &AnalogyArgs) -> CmdResult {
    let mut manifest = RunManifest::start("analogy", args);
    let model = load_model(&args.model, &mut manifest)?;
    let rows = run_analogy(&args.h1, &args.h2, &args.h3, args.k, &model.embeddings()?, &model.ckpt.vocab)?;
    ranked_output(&rows, args.out.as_deref(), manifest)
}

fn parse_weights(items: &[String]) -> Result<Option<std::collections::BTreeMap<String, f64>>, CliError> {
    if items.is_empty() {
        return Ok(None);
    }
    items
        .iter()
        .map(|item| {
            let (name, w) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("weight `{item}` is not name=value")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("weight `{item}` is not a number")))?;
            Ok((name.trim().to_string(), w))
        })
        .collect::<Result<_, _>>()
        .map(Some)
}

pub fn impute(args: &ImputeArgs) -> CmdResult {
    let mut manifest = RunManifest::start("impute", args);
    let mut model = load_model(&args.model, &mut manifest)?;
    let mut policy = ImputationPolicy {
        radius_km: args.radius_km,
        pool_size: args.pool_size,
        ..ImputationPolicy::default()
    };
    if let Some(w) = parse_weights(&args.weights)? {
        policy.weights = w;
    }
    let audit = impute_cold_start(
        &mut model.ckpt.params,
        &model.dir.catalog,
        &model.dir.schema,
        &model.ckpt.vocab,
        &policy,
        None,
    )?;
    model.ckpt.save(&args.out)?;
    write_atomic(&args.audit, audit_csv(&audit).as_bytes())?;
    manifest.artifact("checkpoint", &args.out);
    manifest.artifact("audit", &args.audit);
    let count = |f: Fallback| audit.iter().filter(|r| r.fallback == f).count();
    let (pooled, market, global) = (count(Fallback::None), count(Fallback::Market), count(Fallback::Global));
    manifest.summary = json!({
        "imputed": audit.len(),
        "pooled": pooled,
        "market_mean": market,
        "global_mean": global,
    });
    println!(
        "imputed {} cold-start hotels: {pooled} from similar-hotel pools, {market} from market means, {global} from the global mean",
        audit.len()
    );
    manifest.finish(&manifest_beside(&args.out))?;
    Ok(())
}

pub fn export(args: &ExportArgs) -> CmdResult {
    let mut manifest = RunManifest::start("export", args);
    let model = load_model(&args.model, &mut manifest)?;
    let extra = args
        .extra
        .iter()
        .map(|s| VectorKind::from_str(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut bytes = Vec::new();
    write_embeddings(&mut bytes, &model.ckpt.vocab, &model.embeddings()?, &extra)?;
    write_atomic(&args.out, &bytes)?;
    manifest.artifact("embeddings", &args.out);
    println!("wrote {} embeddings to {}", model.ckpt.vocab.len(), args.out.display());
    manifest.finish(&manifest_beside(&args.out))?;
    Ok(())
}
