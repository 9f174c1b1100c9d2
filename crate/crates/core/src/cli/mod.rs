//! Command-line driver: corpus generation, training, cross-validation,
//! augmentation sweeps and checkpoint evaluation, each replayable from the
//! manifest it writes.
//!
//! With `--from-manifest`, flags other than `--out` and `--jobs` are ignored
//! and the recorded configuration is used; `--out` defaults to the directory
//! holding the manifest.

mod commands;
mod manifest;

pub use manifest::{
    CvCommandConfig, EvaluateCommandConfig, ExperimentManifest, SweepCommandConfig, TrainCommandConfig,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::dataio::DataError;
use crate::harness::HarnessError;
use crate::models::{ModelError, ModelKind};
use crate::numerics::Precision;

pub const DATA_ENV: &str = "COILTSC_DATA";

#[derive(Debug, Parser)]
#[command(name = "coiltsc", version, about = "Failure prediction for MRI head/neck coils from telemetry time series")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic coil telemetry corpus.
    Generate(GenerateArgs),
    /// Train one model on a stratified 70/30 coil split.
    Train(TrainArgs),
    /// Leave-coils-out k-fold cross-validation.
    Cv(CvArgs),
    /// Cross-validation at several training broken fractions.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub coils: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub records_per_day: Option<usize>,
    #[arg(long)]
    pub broken_frac: Option<f64>,
    /// Defective level shift in total standard deviations.
    #[arg(long)]
    pub shift_sigmas: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// csv or jsonl (default csv).
    #[arg(long)]
    pub format: Option<String>,
    /// JSON corpus configuration; flags override its fields.
    #[arg(long, conflicts_with = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Replay the configuration recorded in a manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOptions {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present_any = ["from_manifest", "spec"])]
    pub model: Option<ModelKind>,
    /// JSON model spec overriding the default architecture.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Dataset file or directory.
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long, conflicts_with = "all_models")]
    pub model: Option<ModelKind>,
    /// Run all four architectures.
    #[arg(long)]
    pub all_models: bool,
    /// JSON model spec overriding the default architecture.
    #[arg(long, conflicts_with = "all_models")]
    pub spec: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Raise the training broken fraction to this value.
    #[arg(long)]
    pub augment_target: Option<f64>,
    #[command(flatten)]
    pub train: TrainOptions,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, required_unless_present_any = ["from_manifest", "spec"])]
    pub model: Option<ModelKind>,
    /// JSON model spec overriding the default architecture.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated broken fractions; `current` keeps the data as is.
    /// Defaults to current,0.024,0.026.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    /// File with one coil id per line; only these coils are evaluated.
    #[arg(long)]
    pub coils: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

/// Usage and validation problems exit with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Invalid(_) => CliError::Usage(e.to_string()),
            HarnessError::Data(d) => d.into(),
            HarnessError::Model(m) => m.into(),
            HarnessError::Augment(a) => a.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) | DataError::MissingClass(_) | DataError::TooFewBroken { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidSpec(_) | ModelError::KindMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidConfig(_) | AugmentError::Unreachable { .. } => CliError::Usage(e.to_string()),
            AugmentError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Cv(a) => commands::cv(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
