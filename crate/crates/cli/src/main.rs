mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Semi-supervised change detection: data preparation, training,
/// evaluation, ablations and figures.
#[derive(Debug, Parser)]
#[command(name = "gtpc", version, propagate_version = true)]
#[command(after_help = "Examples:
  gtpc --seed 1 synth --count 400 --size 64 --out data/synth
  gtpc --seed 1 split --data data/synth --ratio 0.05 --val 0.1 --test 0.2 --out data/synth/split.toml
  gtpc --config desk.toml --out-dir runs train --data data/synth --manifest data/synth/split.toml
  gtpc eval --checkpoint runs/gtpc-<hash>/best.safetensors --data data/synth --manifest data/synth/split.toml
  gtpc --config desk.toml ablate --data data/synth --manifest data/synth/split.toml
  gtpc --config desk.toml gate-sweep --data data/synth --manifest data/synth/split.toml
  gtpc render --checkpoint runs/gtpc-<hash>/best.safetensors --data data/synth --out maps")]
pub struct Cli {
    /// Experiment configuration (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed (and seeds `split` and `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Strict single-threaded execution. Every command already runs on one
    /// thread; the flag is recorded for reproducibility.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root with `A/`, `B/` and `label/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Tile samples into square patches of this size before use.
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Split manifest (from `gtpc split`).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a labeled/unlabeled split manifest.
    ///
    /// Uses `train.txt`/`val.txt`/`test.txt` in the dataset root when
    /// present, otherwise holds out `--val` and `--test` fractions.
    ///
    ///   gtpc --seed 1 split --data data/synth --ratio 0.05 --out split.toml
    Split {
        #[command(flatten)]
        data: DataArgs,
        /// Labeled share of the training ids, in (0, 1].
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0.0)]
        val: f64,
        #[arg(long, default_value_t = 0.0)]
        test: f64,
        /// Manifest path; `<out-dir>/split.toml` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generates a synthetic labeled dataset.
    ///
    ///   gtpc --seed 7 synth --count 400 --size 64 --out data/synth
    Synth {
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one model and writes a run directory under `--out-dir`.
    ///
    ///   gtpc --config desk.toml train --data data/synth --manifest split.toml --variant sup_only
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the configured variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Reports IoU and OA of a checkpoint.
    ///
    ///   gtpc eval --checkpoint runs/x/best.safetensors --data data/synth --manifest split.toml --split test
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// One of test, val, labeled, unlabeled, all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Trains every variant with the same seed and tabulates test IoU/OA.
    ///
    ///   gtpc --config desk.toml ablate --data data/synth --manifest split.toml
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset; all five by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Trains the gated model at several gate quantiles.
    ///
    ///   gtpc --config desk.toml gate-sweep --data data/synth --manifest split.toml --quantiles 0.25,0.5,0.75
    GateSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
        quantiles: Vec<f64>,
    },
    /// Writes colour-coded error maps (white TP, black TN, red FP, green FN).
    ///
    ///   gtpc render --checkpoint runs/x/best.safetensors --data data/synth --split test --out maps
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Render at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
