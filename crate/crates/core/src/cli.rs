//! Command-line entry point wiring the full workflow: gen-data →
//! train-word2vec → train → eval → index → retrieve | replay | serve,
//! plus the modality ablation. One binary, explicit file paths, exit codes
//! 0 = success, 1 = validation/runtime error, 2 = usage error.
//!
//! Config precedence per knob: command-line flag > config file section >
//! built-in default. The fully resolved configuration is echoed into the
//! run manifest written alongside each command's outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{
    load_catalog, load_events, read_jsonl, render_table, write_jsonl, Catalog, EventRecord,
    ProductRecord,
};
use crate::error::{Error, Result};
use crate::eval::{replay, MetricRecord};
use crate::index::{build_index, EmbeddingIndex};
use crate::manifest::{manifest_path, RunRecorder};
use crate::retrieval::{RetrievalRequest, Retriever, Strategy};
use crate::server::serve;
use crate::synthetic::{generate_synthetic, SyntheticConfig};
use crate::text::{tokenize, Vocabulary};
use crate::towers::{Modality, ModelCheckpoint};
use crate::training::{
    build_triples, evaluate_split, is_validation_user, time_split_cutoff, train, OptimizerKind,
    TrainConfig, TrainingTriple,
};
use crate::word2vec::{train_word2vec, Word2vecConfig, WordVectors};

/// Copy every flag that was actually given onto the resolved config.
macro_rules! apply_flags {
    ($cfg:expr, $args:expr, { $($field:ident),* $(,)? }) => {
        $(if let Some(v) = $args.$field { $cfg.$field = v; })*
    };
}

#[derive(Parser)]
#[command(
    name = "pairnn",
    version,
    about = "Desk-scale marketplace retrieval: synthetic data, two-tower training, indexing, serving"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog and event log
    GenData(GenDataArgs),
    /// Train word vectors on product text
    TrainWord2vec(TrainWord2vecArgs),
    /// Train the two-tower model on message/impression triples
    Train(TrainArgs),
    /// Evaluate a checkpoint: pairwise accuracy and average rank loss
    Eval(EvalArgs),
    /// Embed every product and write the retrieval index
    Index(IndexArgs),
    /// Answer one retrieval query against an index
    Retrieve(RetrieveArgs),
    /// Replay held-out events and report recall@N per strategy
    Replay(ReplayArgs),
    /// Serve retrieval queries over a local TCP socket
    Serve(ServeArgs),
    /// Train text-only, image-only, and text+image models and compare them
    Ablation(AblationArgs),
}

/// Optional TOML config file. Section names match subcommands; the
/// [pipeline] section holds the retrieval window and split knobs shared by
/// eval, retrieve, replay, and serve.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "gen-data")]
    gen_data: Option<SyntheticConfig>,
    word2vec: Option<Word2vecConfig>,
    train: Option<TrainConfig>,
    pipeline: Option<PipelineConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    /// Recency window size M.
    m: usize,
    /// Result count N.
    n: usize,
    /// Share of events (by time) on the training side.
    time_split: f64,
    workers: usize,
    port: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            m: 500,
            n: 50,
            time_split: 0.8,
            workers: 1,
            port: 7878,
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::format(path, format!("config: {e}")))
}

pub fn run() -> i32 {
    // Clap itself exits with status 2 on unknown flags/subcommands.
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainWord2vec(a) => cmd_train_word2vec(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Index(a) => cmd_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Directory receiving users.jsonl, products.jsonl, events.jsonl
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// TOML config file; flags override its [gen-data] section
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for all generator randomness (default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of users (default 2000)
    #[arg(long)]
    n_users: Option<usize>,
    /// Number of products (default 10000)
    #[arg(long)]
    n_products: Option<usize>,
    /// Number of planted interest topics (default 10)
    #[arg(long)]
    n_topics: Option<usize>,
    /// Generated vocabulary size (default 600)
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Share of topical tokens in product text, 0..=1 (default 0.8)
    #[arg(long)]
    text_signal: Option<f64>,
    /// Topic prototype scale inside image features (default 0.8)
    #[arg(long)]
    image_signal: Option<f64>,
    /// Share of keywords from the user's own topic, 0..=1 (default 0.9)
    #[arg(long)]
    keyword_signal: Option<f64>,
    /// Message probability on topic match (default 0.3)
    #[arg(long)]
    p_hi: Option<f64>,
    /// Message probability on topic mismatch (default 0.01)
    #[arg(long)]
    p_lo: Option<f64>,
    /// Geo spread around each center in km (default 20)
    #[arg(long)]
    geo_spread_km: Option<f64>,
    /// Image feature dimension (default 64)
    #[arg(long)]
    d_img: Option<usize>,
    /// Demographic vector dimension (default 8)
    #[arg(long)]
    d_demo: Option<usize>,
    /// Number of geographic centers (default 5)
    #[arg(long)]
    n_centers: Option<usize>,
    /// Search radius written into every user profile in km (default 80)
    #[arg(long)]
    radius_km: Option<f64>,
    /// Impressions sampled per user (default 30)
    #[arg(long)]
    impressions_per_user: Option<usize>,
    /// Recency window impressions are drawn from (default 500)
    #[arg(long)]
    impression_window: Option<usize>,
    /// Simulated activity span in days (default 30)
    #[arg(long)]
    event_days: Option<f64>,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut cfg = file.gen_data.unwrap_or_default();
    apply_flags!(cfg, args, {
        seed, n_users, n_products, n_topics, vocab_size, text_signal, image_signal,
        keyword_signal, p_hi, p_lo, geo_spread_km, d_img, d_demo, n_centers, radius_km,
        impressions_per_user, impression_window, event_days,
    });
    let mut recorder = RunRecorder::new("gen-data", serde_json::to_value(&cfg)?, cfg.seed);
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_jsonl(&args.out_dir.join("users.jsonl"), &data.users)?;
    write_jsonl(&args.out_dir.join("products.jsonl"), &data.products)?;
    write_jsonl(&args.out_dir.join("events.jsonl"), &data.events)?;
    recorder.write(&args.out_dir.join("gen-data.manifest.json"))?;
    println!(
        "wrote {} users, {} products, {} events under {}",
        data.users.len(),
        data.products.len(),
        data.events.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------- train-word2vec

#[derive(Args)]
struct TrainWord2vecArgs {
    /// Product catalog (JSONL); titles + descriptions form the corpus
    #[arg(long, value_name = "FILE")]
    products: PathBuf,
    /// Output vectors file
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file; flags override its [word2vec] section
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Vector dimension (default 64)
    #[arg(long)]
    dim: Option<usize>,
    /// Maximum skip-gram window (default 4)
    #[arg(long)]
    window: Option<usize>,
    /// Negative samples per positive pair (default 5)
    #[arg(long)]
    negatives: Option<usize>,
    /// Passes over the corpus (default 5)
    #[arg(long)]
    epochs: Option<usize>,
    /// Minimum token frequency kept in the vocabulary (default 1)
    #[arg(long)]
    min_count: Option<u64>,
    /// Seed for init and sampling (default 42)
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_train_word2vec(args: TrainWord2vecArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut cfg = file.word2vec.unwrap_or_default();
    apply_flags!(cfg, args, { dim, window, negatives, epochs, min_count, seed });
    let mut recorder = RunRecorder::new("train-word2vec", serde_json::to_value(&cfg)?, cfg.seed);
    recorder.input(&args.products)?;
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let products: Vec<ProductRecord> = read_jsonl(&args.products)?;
    let docs: Vec<String> = products
        .iter()
        .map(|p| format!("{} {}", p.title, p.description))
        .collect();
    let vocab = Vocabulary::build(docs.iter(), cfg.min_count);
    let id_docs: Vec<Vec<u32>> = docs.iter().map(|d| vocab.known_ids(&tokenize(d))).collect();
    let (vectors, epoch_losses) = train_word2vec(&vocab, &id_docs, &cfg)?;
    for (i, loss) in epoch_losses.iter().enumerate() {
        println!("{}", json!({ "epoch": i + 1, "sgns_loss": loss }));
    }
    vectors.save(&args.output)?;
    recorder.write(&manifest_path(&args.output))?;
    println!(
        "saved {} vectors of dim {} to {}",
        vocab.len(),
        cfg.dim,
        args.output.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Event log (JSONL)
    #[arg(long, value_name = "FILE")]
    events: PathBuf,
    /// Word vectors file from train-word2vec
    #[arg(long, value_name = "FILE")]
    vectors: PathBuf,
    /// Output checkpoint file
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file; flags override its [train] section
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    tuning: TrainTuning,
    /// Input modality: text | image | both (default both)
    #[arg(long)]
    modality: Option<Modality>,
    /// Share of events (by time) used for training; the rest is held out
    /// for replay (default 0.8)
    #[arg(long)]
    time_split: Option<f64>,
}

/// Tower training tunables shared by train and ablation.
#[derive(Args)]
struct TrainTuning {
    /// Rank margin xi (default 1.0)
    #[arg(long)]
    margin: Option<f32>,
    /// Training epochs; 0 leaves the init untouched (default 10)
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size (default 256)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Step size (default 0.001)
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Optimizer: sgd | adam (default adam)
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Sampled negatives per positive (default 14)
    #[arg(long)]
    negatives_per_positive: Option<usize>,
    /// Decoupled weight decay per step, biases exempt (default 0.0)
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Seed for init, sampling, shuffling (default 42)
    #[arg(long)]
    seed: Option<u64>,
}

/// User + product catalog paths shared by every consumer of the catalog.
#[derive(Args)]
struct DataPaths {
    /// User profiles (JSONL)
    #[arg(long, value_name = "FILE")]
    users: PathBuf,
    /// Product catalog (JSONL)
    #[arg(long, value_name = "FILE")]
    products: PathBuf,
}

fn resolve_train_config(file: &FileConfig, tuning: &TrainTuning) -> TrainConfig {
    let mut cfg = file.train.clone().unwrap_or_default();
    let args = tuning;
    apply_flags!(cfg, args, {
        margin, epochs, batch_size, learning_rate, optimizer, negatives_per_positive,
        weight_decay, seed,
    });
    cfg
}

/// Events strictly before the cutoff train; the rest replay.
fn split_events(events: &[EventRecord], fraction: f64) -> Result<(Vec<EventRecord>, Vec<EventRecord>)> {
    let cutoff = time_split_cutoff(events, fraction)?;
    let (before, after) = events.iter().partition(|e| e.timestamp < cutoff);
    Ok((before, after))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut cfg = resolve_train_config(&file, &args.tuning);
    if let Some(m) = args.modality {
        cfg.modality = m;
    }
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let time_split = args.time_split.unwrap_or(pipeline.time_split);
    let mut recorder = RunRecorder::new(
        "train",
        json!({ "train": cfg, "time_split": time_split }),
        cfg.seed,
    );
    for p in [&args.data.users, &args.data.products, &args.events, &args.vectors] {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let events = load_events(&args.events)?;
    let vectors = WordVectors::load(&args.vectors)?;
    let (train_events, _) = split_events(&events, time_split)?;
    let built = build_triples(&train_events, cfg.negatives_per_positive, cfg.seed)?;
    if built.skipped_users > 0 {
        eprintln!(
            "warning: skipped {} users with positives but no negative candidates",
            built.skipped_users
        );
    }
    let out = train(&catalog, &built.triples, &vectors, &cfg)?;
    for m in &out.metrics {
        println!("{}", serde_json::to_string(m)?);
    }
    out.checkpoint.save(&args.output)?;
    recorder.write(&manifest_path(&args.output))?;
    if let Some(epoch) = out.diverged_at_epoch {
        eprintln!(
            "kept the last stable checkpoint at {}",
            args.output.display()
        );
        return Err(Error::Diverged { epoch });
    }
    if let Some(epoch) = out.kept_epoch {
        eprintln!("kept epoch {epoch} (best validation accuracy)");
    }
    println!("saved checkpoint to {}", args.output.display());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Event log the training triples were built from (JSONL)
    #[arg(long, value_name = "FILE")]
    events: PathBuf,
    /// Word vectors file (vocabulary source)
    #[arg(long, value_name = "FILE")]
    vectors: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output report file (JSON lines)
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file ([pipeline] section)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Which user-hash split to score: train | val | all (default val)
    #[arg(long, default_value = "val")]
    split: SplitChoice,
    /// Share of events (by time) on the training side (default 0.8)
    #[arg(long)]
    time_split: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitChoice {
    Train,
    Val,
    All,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let time_split = args.time_split.unwrap_or(pipeline.time_split);
    let checkpoint = ModelCheckpoint::load(&args.checkpoint)?;
    // Triples are rebuilt exactly as training built them, from the config
    // echoed in the checkpoint.
    let train_cfg: TrainConfig = serde_json::from_value(checkpoint.train_config.clone())?;
    let mut recorder = RunRecorder::new(
        "eval",
        json!({ "train": train_cfg, "time_split": time_split, "split": format!("{:?}", args.split).to_lowercase() }),
        train_cfg.seed,
    );
    for p in [&args.data.users, &args.data.products, &args.events, &args.vectors, &args.checkpoint] {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let events = load_events(&args.events)?;
    let vectors = WordVectors::load(&args.vectors)?;
    checkpoint.check_vocab(vectors.vocab())?;
    let (train_events, _) = split_events(&events, time_split)?;
    let built = build_triples(&train_events, train_cfg.negatives_per_positive, train_cfg.seed)?;
    let (val, train_side): (Vec<TrainingTriple>, Vec<TrainingTriple>) = built
        .triples
        .iter()
        .partition(|t| is_validation_user(t.user_id));
    let mut lines = String::new();
    let chosen: &[(&str, &[TrainingTriple])] = match args.split {
        SplitChoice::Train => &[("train", &train_side)],
        SplitChoice::Val => &[("val", &val)],
        SplitChoice::All => &[("train", &train_side), ("val", &val)],
    };
    for (name, triples) in chosen {
        let m = evaluate_split(&checkpoint, &catalog, vectors.vocab(), triples)?;
        let line = json!({ "split": name, "accuracy": m.accuracy, "average_loss": m.average_loss });
        println!("{line}");
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    std::fs::write(&args.output, lines)?;
    recorder.write(&manifest_path(&args.output))?;
    Ok(())
}

// ------------------------------------------------------------------- index

#[derive(Args)]
struct IndexArgs {
    /// Product catalog (JSONL)
    #[arg(long, value_name = "FILE")]
    products: PathBuf,
    /// Checkpoint whose product tower embeds the catalog
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Word vectors file (vocabulary source)
    #[arg(long, value_name = "FILE")]
    vectors: PathBuf,
    /// Output index file
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file ([pipeline] section)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Embedding threads; 1 = fully sequential (default 1)
    #[arg(long)]
    workers: Option<usize>,
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let workers = args.workers.unwrap_or(pipeline.workers).max(1);
    let mut recorder = RunRecorder::new("index", json!({ "workers": workers }), 0);
    for p in [&args.products, &args.checkpoint, &args.vectors] {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let products: Vec<ProductRecord> = read_jsonl(&args.products)?;
    let catalog = Catalog::new(Vec::new(), products)?;
    let checkpoint = ModelCheckpoint::load(&args.checkpoint)?;
    let vectors = WordVectors::load(&args.vectors)?;
    let index = build_index(&catalog, &checkpoint, vectors.vocab(), workers)?;
    index.save(&args.output)?;
    recorder.write(&manifest_path(&args.output))?;
    println!(
        "indexed {} products at dim {} into {}",
        index.len(),
        index.dim(),
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- retrieve

/// Artifact paths for strategies that need them; time-based retrieval runs
/// with neither.
#[derive(Args)]
struct ArtifactPaths {
    /// Checkpoint (required by the pairnn strategy)
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Word vectors (required by pairnn and word2vec strategies)
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
}

impl ArtifactPaths {
    fn load(&self) -> Result<(Option<ModelCheckpoint>, Option<WordVectors>)> {
        let ckpt = match &self.checkpoint {
            Some(p) => Some(ModelCheckpoint::load(p)?),
            None => None,
        };
        let vectors = match &self.vectors {
            Some(p) => Some(WordVectors::load(p)?),
            None => None,
        };
        Ok((ckpt, vectors))
    }
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Index file from the index command
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactPaths,
    /// Output results file (JSON lines); results also print to stdout
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file ([pipeline] section)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// User to retrieve for
    #[arg(long)]
    user_id: u64,
    /// Retrieval strategy: pairnn | word2vec | time
    #[arg(long)]
    strategy: Strategy,
    /// Recency window M (default 500)
    #[arg(long)]
    m: Option<usize>,
    /// Result count N (default 50)
    #[arg(long)]
    n: Option<usize>,
    /// Only consider products created strictly before this timestamp
    #[arg(long, allow_negative_numbers = true)]
    as_of: Option<i64>,
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let req = RetrievalRequest {
        user_id: args.user_id,
        m: args.m.unwrap_or(pipeline.m),
        n: args.n.unwrap_or(pipeline.n),
        strategy: args.strategy,
        as_of: args.as_of,
    };
    let mut recorder = RunRecorder::new("retrieve", serde_json::to_value(&req)?, 0);
    for p in [&args.data.users, &args.data.products, &args.index] {
        recorder.input(p)?;
    }
    for p in [&args.artifacts.checkpoint, &args.artifacts.vectors].into_iter().flatten() {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let index = EmbeddingIndex::load(&args.index)?;
    let (ckpt, vectors) = args.artifacts.load()?;
    let retriever = Retriever::new(catalog, index, ckpt, vectors)?;
    let results = retriever.retrieve(&req)?;
    let mut out = String::new();
    for r in &results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    print!("{out}");
    std::fs::write(&args.output, out)?;
    recorder.write(&manifest_path(&args.output))?;
    Ok(())
}

// ------------------------------------------------------------------ replay

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Event log (JSONL); the held-out suffix is replayed
    #[arg(long, value_name = "FILE")]
    events: PathBuf,
    /// Index file from the index command
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactPaths,
    /// Output report file (JSON lines)
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// TOML config file ([pipeline] section)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Strategies to replay, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [Strategy::Pairnn, Strategy::Word2vec, Strategy::Time])]
    strategies: Vec<Strategy>,
    /// Recency window M (default 500)
    #[arg(long)]
    m: Option<usize>,
    /// Result count N (default 50)
    #[arg(long)]
    n: Option<usize>,
    /// Share of events (by time) on the training side; the rest replays
    /// (default 0.8)
    #[arg(long)]
    time_split: Option<f64>,
    /// Replay threads; 1 = fully sequential (default 1)
    #[arg(long)]
    workers: Option<usize>,
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let m = args.m.unwrap_or(pipeline.m);
    let n = args.n.unwrap_or(pipeline.n);
    let time_split = args.time_split.unwrap_or(pipeline.time_split);
    let workers = args.workers.unwrap_or(pipeline.workers).max(1);
    let strategy_names: Vec<String> = args.strategies.iter().map(|s| s.to_string()).collect();
    let mut recorder = RunRecorder::new(
        "replay",
        json!({ "m": m, "n": n, "time_split": time_split, "workers": workers, "strategies": strategy_names }),
        0,
    );
    for p in [&args.data.users, &args.data.products, &args.events, &args.index] {
        recorder.input(p)?;
    }
    for p in [&args.artifacts.checkpoint, &args.artifacts.vectors].into_iter().flatten() {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let events = load_events(&args.events)?;
    let index = EmbeddingIndex::load(&args.index)?;
    let (ckpt, vectors) = args.artifacts.load()?;
    let retriever = Retriever::new(catalog, index, ckpt, vectors)?;
    let (_, held_out) = split_events(&events, time_split)?;
    let report = replay(&retriever, &held_out, &args.strategies, m, n, workers)?;
    print!("{}", report.table());
    std::fs::write(&args.output, report.lines())?;
    recorder.write(&manifest_path(&args.output))?;
    Ok(())
}

// ------------------------------------------------------------------- serve

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Index file from the index command
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactPaths,
    /// TOML config file ([pipeline] section)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// TCP port on 127.0.0.1; 0 picks an ephemeral port (default 7878)
    #[arg(long)]
    port: Option<u16>,
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let port = args.port.unwrap_or(pipeline.port);
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let index = EmbeddingIndex::load(&args.index)?;
    let (ckpt, vectors) = args.artifacts.load()?;
    let retriever = Retriever::new(catalog, index, ckpt, vectors)?;
    let handle = serve(retriever, port)?;
    // No files are produced, so the resolved configuration is echoed here
    // instead of a manifest.
    println!("{}", json!({ "listening": handle.addr().to_string(), "port": port }));
    handle.join();
    Ok(())
}

// ---------------------------------------------------------------- ablation

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    data: DataPaths,
    /// Event log (JSONL)
    #[arg(long, value_name = "FILE")]
    events: PathBuf,
    /// Word vectors file from train-word2vec
    #[arg(long, value_name = "FILE")]
    vectors: PathBuf,
    /// Directory receiving per-modality checkpoints and the report
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// TOML config file; flags override its [train] section
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    tuning: TrainTuning,
    /// Modalities to compare, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [Modality::Text, Modality::Image, Modality::Both])]
    modalities: Vec<Modality>,
    /// Share of events (by time) used for training (default 0.8)
    #[arg(long)]
    time_split: Option<f64>,
}

fn modality_label(m: Modality) -> &'static str {
    match m {
        Modality::Text => "Text only",
        Modality::Image => "Image only",
        Modality::Both => "Text + Image",
    }
}

fn cmd_ablation(args: AblationArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let base = resolve_train_config(&file, &args.tuning);
    let pipeline = file.pipeline.clone().unwrap_or_default();
    let time_split = args.time_split.unwrap_or(pipeline.time_split);
    let modality_names: Vec<String> = args.modalities.iter().map(|m| m.to_string()).collect();
    let mut recorder = RunRecorder::new(
        "ablation",
        json!({ "train": base, "time_split": time_split, "modalities": modality_names }),
        base.seed,
    );
    for p in [&args.data.users, &args.data.products, &args.events, &args.vectors] {
        recorder.input(p)?;
    }
    if let Some(c) = &args.config {
        recorder.input(c)?;
    }
    let catalog = load_catalog(&args.data.users, &args.data.products)?;
    let events = load_events(&args.events)?;
    let vectors = WordVectors::load(&args.vectors)?;
    let (train_events, _) = split_events(&events, time_split)?;
    // One triple set reused across modalities: identical seed, identical data.
    let built = build_triples(&train_events, base.negatives_per_positive, base.seed)?;
    if built.skipped_users > 0 {
        eprintln!(
            "warning: skipped {} users with positives but no negative candidates",
            built.skipped_users
        );
    }
    let val: Vec<TrainingTriple> = built
        .triples
        .iter()
        .filter(|t| is_validation_user(t.user_id))
        .copied()
        .collect();
    std::fs::create_dir_all(&args.out_dir)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut records: Vec<MetricRecord> = Vec::new();
    for &modality in &args.modalities {
        let mut cfg = base.clone();
        cfg.modality = modality;
        let out = train(&catalog, &built.triples, &vectors, &cfg)?;
        out.checkpoint
            .save(&args.out_dir.join(format!("ablation-{modality}.ckpt")))?;
        if let Some(epoch) = out.diverged_at_epoch {
            return Err(Error::Diverged { epoch });
        }
        let metrics = evaluate_split(&out.checkpoint, &catalog, vectors.vocab(), &val)?;
        rows.push(vec![
            modality_label(modality).to_string(),
            format!("{:.4}", metrics.accuracy),
            format!("{:.4}", metrics.average_loss),
        ]);
        for (metric, value) in [("accuracy", metrics.accuracy), ("average_loss", metrics.average_loss)] {
            records.push(MetricRecord {
                strategy: modality.to_string(),
                metric: metric.to_string(),
                value,
            });
        }
    }
    let table = render_table(&["Model", "Accuracy", "Average Loss"], &rows);
    print!("{table}");
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&r.line());
        lines.push('\n');
    }
    std::fs::write(args.out_dir.join("ablation.jsonl"), lines)?;
    recorder.write(&args.out_dir.join("ablation.manifest.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_flags() -> TrainTuning {
        TrainTuning {
            margin: None,
            epochs: None,
            batch_size: None,
            learning_rate: None,
            optimizer: None,
            negatives_per_positive: None,
            weight_decay: None,
            seed: None,
        }
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig = toml::from_str(
            "[train]\nepochs = 3\nmargin = 0.5\n\n[pipeline]\nm = 9\n",
        )
        .unwrap();
        let mut flags = no_flags();
        flags.epochs = Some(7);
        let cfg = resolve_train_config(&file, &flags);
        assert_eq!(cfg.epochs, 7); // flag beats file
        assert_eq!(cfg.margin, 0.5); // file beats default
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size); // default
        assert_eq!(file.pipeline.as_ref().unwrap().m, 9);
        assert_eq!(file.pipeline.unwrap().n, 50); // section default fills gaps
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<FileConfig>("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn split_events_is_a_partition_with_boundary_on_the_held_out_side() {
        let mk = |ts: i64| EventRecord {
            kind: crate::catalog::EventKind::Impression,
            user_id: 1,
            product_id: 1,
            timestamp: ts,
        };
        let events: Vec<EventRecord> = (0..10).map(mk).collect();
        let (before, after) = split_events(&events, 0.8).unwrap();
        assert_eq!(before.len(), 8);
        assert_eq!(after.len(), 2);
        assert!(before.iter().all(|e| e.timestamp < 8));
        assert!(after.iter().all(|e| e.timestamp >= 8));
        let (all, none) = split_events(&events, 1.0).unwrap();
        assert_eq!((all.len(), none.len()), (10, 0));
        let (nothing, everything) = split_events(&events, 0.0).unwrap();
        assert_eq!((nothing.len(), everything.len()), (0, 10));
        assert!(split_events(&events, 1.5).is_err());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
