//! `mmcaps`: data generation, training, evaluation, inference, gradient
//! checks and conditioning ablations.
//!
//! Every command writes its state under `--out`. Failures print one line of
//! the form `mmcaps-error<TAB>kind=<kind><TAB>message=<text>` on stderr and
//! exit with status 2; a failed gradient check or ablation contract exits 1.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmcaps::{Conditioning, EvalMode};

#[derive(Parser, Debug)]
#[command(name = "mmcaps", version, about = "Text-conditioned capsule segmentation of synthetic videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file (`key = value` lines); defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads. Kernels run on one thread, so any value reproduces bit-identically.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes the train/val/test manifests and the vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Trains a model and writes a checkpoint with step and validation logs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        conditioning: Option<Conditioning>,
        /// Resumes from a checkpoint directory written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "frame")]
        mode: EvalMode,
    },
    /// Segments one video for a query and writes a PGM per frame.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query text; defaults to the generated query when `--sample` is used.
        #[arg(long)]
        query: Option<String>,
        /// Raw video file (see `write_raw_video`).
        #[arg(long, conflicts_with = "sample")]
        video: Option<PathBuf>,
        /// Generates the scene for this sample seed instead of reading a video.
        #[arg(long)]
        sample: Option<u64>,
    },
    /// Compares analytic gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Operation name, or `all`.
        #[arg(default_value = "all")]
        scope: String,
        /// Lists the available checks and exits.
        #[arg(long)]
        list: bool,
    },
    /// Trains and evaluates once per conditioning method and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds to run; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Restricts the run to these methods.
        #[arg(long, value_delimiter = ',')]
        conditioning: Vec<Conditioning>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Failed(msg)) => {
            eprintln!("mmcaps-error\tkind=check\tmessage={msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("mmcaps-error\tkind={}\tmessage={}", commands::error_kind(&e), e.to_string().replace(['\n', '\t'], " "));
            ExitCode::from(2)
        }
    }
}
