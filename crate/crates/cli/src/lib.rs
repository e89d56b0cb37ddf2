//! Experiment driver: archive synthesis, splitting, pretraining, training,
//! evaluation and plotting.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stormmeta::skillmetrics::Aggregation;
use stormmeta::trainloops::LossMode;

pub use config::{RunConfig, SplitConfig, Strategy, SEED_ENV};

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<stormmeta::Error> for CliError {
    fn from(e: stormmeta::Error) -> Self {
        match e {
            stormmeta::Error::Argument(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "stormmeta", version, about = "Few-shot translation of storm-event rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event archive.
    Synth(SynthArgs),
    /// Assign train/val/test labels to an archive's events.
    Split(SplitArgs),
    /// Contrastive pretraining of the generator's encoder.
    Pretrain(RunArgs),
    /// Joint or meta-learned training of the translator.
    Train(TrainArgs),
    /// Skill report for a checkpoint or a prediction archive.
    Evaluate(EvaluateArgs),
    /// Render MAE curves and skill bars as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub events: u64,
    #[arg(long, default_value_t = 49, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(8..))]
    pub resolution: u64,
    #[arg(long, default_value_t = 3)]
    pub cells: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1", allow_negative_numbers = true)]
    pub fractions: Vec<f64>,
}

/// A config file plus flags that override its fields.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a saved state directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_mode)]
    pub loss_mode: Option<LossMode>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub pretrained_encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Training state to generate predictions with.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Archive whose target channel holds precomputed predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Run config supplying split, task sizes and adaptation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long, value_parser = parse_aggregation)]
    pub aggregation: Option<Aggregation>,
    /// Adapt on each task's support frames before generating.
    #[arg(long)]
    pub adapt: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics logs; each file is one run.
    #[arg(long, num_args = 1..)]
    pub logs: Vec<PathBuf>,
    /// Skill reports to draw as grouped bars.
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Draw every mode found in a log, not only its first.
    #[arg(long)]
    pub all_modes: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: stormmeta::Error| e.to_string())
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    s.parse().map_err(|e: stormmeta::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Split(a) => commands::split(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Plot(a) => plot::plot(&a),
    }
}
