//! The `tpgn` command-line tool: training, evaluation, benchmarks, gradient
//! checks and synthetic data generation.
//!
//! Settings resolve in three layers: built-in defaults, then the `--config`
//! file, then individual flags (including repeated `--set key=value`).
//! Every command writes `manifest.txt` into a fresh output directory named
//! after the hash of its resolved settings before doing any work.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "tpgn", version, about = "Temporal PGN forecasting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a CSV series, then evaluate the best checkpoint.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Time, memory, MAC and depth measurements.
    Bench(BenchArgs),
    /// Finite-difference check of every model parameter.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic hourly sinusoid as CSV.
    Synth(SynthArgs),
}

/// Settings shared by `train` and `eval`.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub lh: Option<String>,
    #[arg(long)]
    pub lf: Option<String>,
    #[arg(long)]
    pub period: Option<String>,
    #[arg(long)]
    pub dm: Option<String>,
    /// 0 or 1.
    #[arg(long)]
    pub norm: Option<String>,
    /// full, long, short, gru, lstm or mlp.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "noise-eps")]
    pub noise_eps: Option<String>,
    /// Any other setting, e.g. `--set max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root under which the run directory is created.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Comma-separated: tpgn, pgn-raw, gru-seq, lstm-seq.
    #[arg(long, default_value = "tpgn,pgn-raw,gru-seq,lstm-seq")]
    pub models: String,
    /// Comma-separated history lengths.
    #[arg(long, default_value = "168")]
    pub lh: String,
    /// Comma-separated forecast lengths.
    #[arg(long, default_value = "168")]
    pub lf: String,
    #[arg(long, default_value_t = 24)]
    pub period: usize,
    #[arg(long, default_value_t = 128)]
    pub dm: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// `train` (forward and backward) or `forward`.
    #[arg(long, default_value = "train")]
    pub mode: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub lh: usize,
    #[arg(long, default_value_t = 8)]
    pub lf: usize,
    #[arg(long, default_value_t = 4)]
    pub period: usize,
    #[arg(long, default_value_t = 2)]
    pub dm: usize,
    /// Check one variant instead of all of them.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 2023)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Number of hourly points.
    #[arg(long, default_value_t = 2400)]
    pub len: usize,
    #[arg(long, default_value_t = 24)]
    pub period: usize,
    /// Phase advance per period, in radians.
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// Runs one parsed command and reports failures on stderr.
pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval { checkpoint, run } => commands::eval(&checkpoint, &run),
        Command::Bench(args) => commands::bench(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Synth(args) => commands::synth(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Sizes the global thread pool from `TPGN_THREADS` when set.
pub fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("TPGN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("TPGN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::other(format!("cannot size thread pool: {e}")))
}
