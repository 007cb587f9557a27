mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "cosam",
    version,
    about = "Collaborative detection and segmentation of small targets in volumetric scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config with optional `model`, `train` and `phantom` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; must not exist unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Detector,
    Segmenter,
    Joint,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a split-tagged manifest.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of volumes.
        #[arg(long)]
        n: usize,
    },
    /// Run one training phase and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        window_size: Option<usize>,
        /// Detector checkpoint (required for the joint phase).
        #[arg(long)]
        det_ckpt: Option<PathBuf>,
        /// Segmenter checkpoint (required for the joint phase).
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split and write report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
    /// Predict boxes and masks for every slice of one volume directory.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
    },
    /// Train and score a detector per window size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [5, 7, 9, 11, 13, 15])]
        sizes: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrained vs. joint vs. joint-with-head comparison over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Render the PR curve and per-volume Dice histogram of a report as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { common, n } => commands::phantom(&argv, &common, n),
        Command::Train {
            common,
            phase,
            data,
            epochs,
            window_size,
            det_ckpt,
            seg_ckpt,
        } => commands::train(
            &argv,
            &common,
            phase,
            &data,
            epochs,
            window_size,
            det_ckpt.as_deref(),
            seg_ckpt.as_deref(),
        ),
        Command::Eval {
            common,
            ckpt,
            data,
            split,
        } => commands::eval(&argv, &common, &ckpt, &data, split),
        Command::Predict {
            common,
            ckpt,
            volume,
        } => commands::predict(&argv, &common, &ckpt, &volume),
        Command::Sweep {
            common,
            data,
            sizes,
            epochs,
        } => commands::sweep(&argv, &common, &data, &sizes, epochs),
        Command::Ablate {
            common,
            data,
            seeds,
        } => commands::ablate(&argv, &common, &data, &seeds),
        Command::Plot { common, report } => commands::plot(&argv, &common, &report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
