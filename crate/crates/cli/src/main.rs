//! `ace`: generate data, build identifiers, train, retrieve, evaluate and
//! benchmark from the command line.
//!
//! Exit codes: 0 on success, 2 for invalid flags, 1 for runtime failures.
//! Failures also print one JSON object on the last stderr line.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ace_core::config::RunConfig;
use ace_core::CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default seed when neither `--seed` nor a config file gives one.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "ace", version, about = "Generative retrieval over coarse-fine semantic identifiers")]
pub struct Cli {
    /// Run seed; overrides the config file's seed [default: 7 or the config's]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; flags override its fields [default: the upstream stage's config.json, else built-in defaults]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/default]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress and the config echo on stderr
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus, queries and their split
    GenData(GenDataArgs),
    /// Cluster and quantize embeddings into semantic identifiers
    BuildIds(BuildIdsArgs),
    /// Train the fusion model on query-identifier pairs
    Train(TrainArgs),
    /// Rank items for one tokenized query
    Retrieve(RetrieveArgs),
    /// Recall@{1,5,10} and MRR@10 on a query split
    Eval(EvalArgs),
    /// Throughput of the generative engine and a dual-tower baseline
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of items [default: 512]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub items: Option<u64>,
    /// Number of latent concepts [default: 16]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub concepts: Option<u64>,
    /// Embedding dimension [default: 64]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: Option<u64>,
    /// Queries generated per item [default: 5]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub queries_per_item: Option<u64>,
    /// Probability of replacing each query token with a random one [default: 0.1]
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Query vocabulary size [default: 2048]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub vocab_size: Option<u64>,
    /// Item noise around its concept center [default: 0.1]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum IdModeArg {
    CoarseFine,
    NoKmeans,
    HierarchicalKmeans,
}

#[derive(Args, Debug)]
pub struct BuildIdsArgs {
    /// Directory holding embeddings.bin [default: --out]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Identifier construction [default: coarse-fine]
    #[arg(long, value_enum)]
    pub mode: Option<IdModeArg>,
    /// Number of coarse clusters K [default: 16]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    /// Number of codebooks M [default: 2]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub codebooks: Option<u64>,
    /// Entries per codebook N [default: 16]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub codebook_size: Option<u64>,
    /// Reconstruction weight alpha [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Commitment weight beta [default: 0.25]
    #[arg(long)]
    pub beta: Option<f64>,
    /// RQ-VAE training epochs [default: 500]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    CoarseFine,
    LastLayer,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding queries.jsonl [default: --out]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding identifiers.jsonl and layout.json [default: --data]
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Training epochs [default: 60]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    /// Examples per optimizer step [default: 64]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Weight of the consistency (bidirectional KL) term [default: 0.15]
    #[arg(long)]
    pub omega: Option<f64>,
    /// Peak learning rate [default: 1e-4]
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// Linear warmup epochs [default: 5]
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Model width [default: 128]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub d_model: Option<u64>,
    /// Encoder layers S [default: 3]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub encoder_layers: Option<u64>,
    /// Decoder layers [default: 3]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub decoder_layers: Option<u64>,
    /// Decoder cross-attention [default: coarse-fine]
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Dropout rate [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Model checkpoint [default: <out>/model.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory holding identifiers.jsonl and layout.json [default: --out]
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Query as comma-separated token ids, e.g. 3,17,42
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub query_tokens: Vec<u32>,
    /// Beam size and number of results [default: 5]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: Option<u64>,
    /// Search the whole output vocabulary instead of the identifier trie
    #[arg(long)]
    pub unconstrained: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint [default: <out>/model.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory holding identifiers.jsonl and layout.json [default: --out]
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Directory holding queries.jsonl [default: --ids]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated beam sizes, one report each [default: 5,25,50]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub beams: Option<Vec<usize>>,
    /// Query split to evaluate [default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Decode without the identifier trie
    #[arg(long)]
    pub unconstrained: bool,
    /// Also write eval_report.csv and print CSV instead of a table
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated candidate counts [default: 10000,100000,1000000]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub candidates: Option<Vec<usize>>,
    /// Logical concurrent clients [default: 100]
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Comma-separated engines: generative, dual-tower [default: generative,dual-tower]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub engines: Option<Vec<String>>,
    /// Measured seconds per engine and candidate count [default: 5]
    #[arg(long)]
    pub duration: Option<f64>,
    /// Warmup seconds before each measurement [default: 1]
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Beam size of the generative engine and top-k of the dual tower [default: 5]
    #[arg(long)]
    pub beam: Option<usize>,
    /// Comma-separated identifier grid for synthetic candidates [default: 128,128,128]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub prefix_sizes: Option<Vec<usize>>,
    /// Also write bench_report.csv and print CSV instead of a table
    #[arg(long)]
    pub csv: bool,
}

/// Why a command failed.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag values found after parsing (exit 2).
    Usage(String),
    /// Runtime failure (exit 1).
    Runtime(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn error_json(e: &CliError) -> serde_json::Value {
    match e {
        CliError::Usage(msg) => serde_json::json!({"error": {"kind": "usage", "exit_code": 2, "message": msg}}),
        CliError::Runtime(err) => {
            let kind = match err {
                CoreError::Tensor(_) => "tensor",
                CoreError::InvalidArgument(_) => "invalid_argument",
                CoreError::Format { .. } => "format",
                CoreError::Io { .. } => "io",
                CoreError::Parse { .. } => "parse",
                CoreError::Training(_) => "training",
                CoreError::LayoutMismatch { .. } => "layout_mismatch",
            };
            let mut v = serde_json::json!({"error": {"kind": kind, "exit_code": 1, "message": err.to_string()}});
            match err {
                CoreError::Io { path, .. } | CoreError::Format { path, .. } | CoreError::Parse { path, .. } => {
                    v["error"]["path"] = path.display().to_string().into();
                }
                CoreError::LayoutMismatch { checkpoint, identifiers } => {
                    v["error"]["checkpoint_fingerprint"] = checkpoint.clone().into();
                    v["error"]["identifiers_fingerprint"] = identifiers.clone().into();
                }
                _ => {}
            }
            v
        }
    }
}

/// Shared state for one invocation.
pub struct Env {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Env {
    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// The base config: `--config`, else `upstream/config.json` when it
    /// exists, else defaults; `--seed` overrides the seed.
    pub fn base_config(&self, upstream: Option<&Path>) -> CliResult<RunConfig> {
        let mut cfg = match (&self.config, upstream.map(|d| d.join("config.json"))) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.is_file() => RunConfig::load(&p)?,
            _ => RunConfig::with_seed(DEFAULT_SEED),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    /// Create the output directory, write `config.json` into it and echo it.
    pub fn echo_config(&self, cfg: &RunConfig) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CoreError::io(&self.out, e))?;
        let path = self.out.join("config.json");
        std::fs::write(&path, cfg.to_json()).map_err(|e| CoreError::io(&path, e))?;
        let compact = serde_json::to_string(cfg).expect("config serializes");
        self.log(format!("seed {} config {compact}", cfg.seed));
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if e.use_stderr() {
                let msg = e.kind().to_string();
                eprintln!("{}", error_json(&CliError::Usage(msg)));
                return ExitCode::from(2);
            }
            return ExitCode::from(code as u8);
        }
    };
    let env = Env {
        seed: cli.seed,
        config: cli.config,
        out: cli.out.unwrap_or_else(|| PathBuf::from("runs/default")),
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&env, a),
        Command::BuildIds(a) => commands::build_ids(&env, a),
        Command::Train(a) => commands::train(&env, a),
        Command::Retrieve(a) => commands::retrieve(&env, a),
        Command::Eval(a) => commands::eval(&env, a),
        Command::Bench(a) => commands::bench(&env, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err}"),
            }
            eprintln!("{}", error_json(&e));
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
