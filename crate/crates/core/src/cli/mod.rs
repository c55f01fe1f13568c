//! Command-line front end. Every command writes files and prints a short
//! summary; exit codes are 0 success, 1 usage, 2 data error, 3 numeric
//! failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::CorpusSplit;
use crate::error::Error;

pub use config::{load_run_config, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "moex", version, about = "Mixture-of-experts chess language model tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded random legal games as movetext, one per line.
    GenCorpus(GenCorpusArgs),
    /// Tokenize movetext and record the board after every ply.
    Ingest(IngestArgs),
    /// Train (or resume, or upcycle into) a model on an ingested corpus.
    Train(TrainArgs),
    /// Dump one layer's MLP hidden code at every ply, with board labels.
    Harvest(HarvestArgs),
    /// Score harvested activations: coverage and board reconstruction.
    Interp(InterpArgs),
    /// Time the three routers over a shape grid and fit the cost model.
    BenchRouter(BenchArgs),
    /// Merge logs and reports of several runs into plot-ready CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub games: usize,
    /// Overridden by MOEX_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub min_plies: usize,
    #[arg(long, default_value_t = 120)]
    pub max_plies: usize,
    /// Probability of restricting a move choice to captures when any exist.
    #[arg(long, default_value_t = 0.5)]
    pub capture_bias: f64,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Movetext or PGN file.
    #[arg(long)]
    pub pgn: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_games: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub val_fraction: f64,
    /// Split seed; overridden by MOEX_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// TOML run configuration (sections model, train, run; dotted keys allowed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint, using its model and training settings.
    #[arg(long, conflicts_with = "upcycle")]
    pub resume: Option<PathBuf>,
    /// Initialize every expert from this dense checkpoint's MLPs.
    #[arg(long)]
    pub upcycle: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.max_iters=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ingested corpus directory [config: run.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [config: run.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 3e-4]
    #[arg(long)]
    pub init_lr: Option<f64>,
    /// [default: 3e-5]
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// [default: 2000]
    #[arg(long)]
    pub warmup_iters: Option<u64>,
    /// [default: 600000]
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// [default: 100]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Balance-loss weight [default: the MoE layer's, 0.001]
    #[arg(long)]
    pub balance_lambda: Option<f64>,
    /// [default: 0; MOEX_SEED overrides the config file]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct HarvestArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Ingested corpus directory.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Block index, 0-based.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of games tagged test for reconstruction scoring.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Seed of the train/test tagging; overridden by MOEX_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Games per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch_games: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for CorpusSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => CorpusSplit::Train,
            SplitArg::Val => CorpusSplit::Val,
            SplitArg::All => CorpusSplit::All,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub activations: PathBuf,
    /// Report path; the per-BSP table goes next to it with a `.csv` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum firing rows for a high-precision classifier.
    #[arg(long, default_value_t = crate::interp::DEFAULT_MIN_FIRE)]
    pub min_fire: usize,
    /// Comma-separated thresholds in [0, 1] [default: 0.0,0.1,...,0.9]
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Seed of the shuffled-label baseline; overridden by MOEX_SEED.
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Skip the shuffled-label baseline.
    #[arg(long)]
    pub no_baseline: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Shape grid, e.g. `N=512,1024;M=8;D=256,512;d=128`.
    #[arg(long, default_value = "N=512,1024,2048,4096;M=8;D=256,512,1024,2048;d=256")]
    pub shapes: String,
    /// `all` or a comma list of topk_linear, sparsity_aware, bruteforce_l0.
    #[arg(long, default_value = "all")]
    pub routers: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overridden by MOEX_SEED.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories produced by `train` (and optionally `interp`).
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::TopK { .. } => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> crate::Result<()> {
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Harvest(a) => commands::harvest(&a).map(|_| ()),
        Command::Interp(a) => commands::interp(&a).map(|_| ()),
        Command::BenchRouter(a) => commands::bench_router(&a).map(|_| ()),
        Command::Report(a) => commands::report(&a),
    }
}

/// Parse `args`, run, print any error and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
