//! `partsplit`: factorize feature-map batches into parts and appearances, then
//! localize, edit and score with the learned factors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partsplit::{PartNorm, StepRule};

use crate::config::DecomposeOverrides;

#[derive(Parser)]
#[command(name = "partsplit", version, about = "Parts/appearance factorization of feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted batch and its ground-truth factors
    Synth(SynthArgs),
    /// Fit appearance and parts factors to a batch
    Decompose(DecomposeArgs),
    /// Specialize the parts factors to individual samples
    Refine(RefineArgs),
    /// Saliency maps and mean-thresholded masks for one appearance concept
    Saliency(SaliencyArgs),
    /// Apply a rank-one edit to every sample of a batch
    Edit(EditArgs),
    /// Edit locality ratio between an original and an edited batch
    Roir(RoirArgs),
    /// Report diagnostics of a fitted model
    Inspect(InspectArgs),
}

/// Location of an activation batch; the spatial grid comes from the sidecar unless given.
#[derive(Args, Clone)]
pub struct BatchInput {
    /// N x C x S activations (.npy)
    #[arg(long, short)]
    pub input: PathBuf,
    /// Grid height, overriding the sidecar
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    /// Grid width, overriding the sidecar
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub rank_appearance: usize,
    #[arg(long, default_value_t = 4)]
    pub rank_parts: usize,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (receives acts.npy, acts.json and truth/)
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub batch: BatchInput,
    /// Output model directory
    #[arg(long, short)]
    pub out: PathBuf,
    /// TOML file with fit settings; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: DecomposeOverrides,
}

#[derive(Args)]
pub struct RefineArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub batch: BatchInput,
    /// Sample indices to refine (default: all)
    #[arg(long, value_delimiter = ',')]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value = "backtracking")]
    pub step_rule: StepRule,
    /// Output directory (receives refined_parts.npy and refine.csv)
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SaliencyArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub batch: BatchInput,
    /// Appearance concept index
    #[arg(long, short)]
    pub concept: usize,
    /// Min-max normalize each exported map
    #[arg(long)]
    pub normalize: bool,
    /// Output directory (receives saliency.npy and masks.npy)
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub batch: BatchInput,
    /// JSON edit record; replaces the individual edit flags
    #[arg(long, conflicts_with_all = ["appearance", "alpha", "part_index", "part_file"])]
    pub record: Option<PathBuf>,
    /// Appearance column to paint
    #[arg(long, required_unless_present = "record")]
    pub appearance: Option<usize>,
    /// Edit magnitude
    #[arg(long, required_unless_present = "record", allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Use column k of the model's parts as the footprint
    #[arg(long, conflicts_with = "part_file")]
    pub part_index: Option<usize>,
    /// Use a length-S (or H x W) .npy array as the footprint
    #[arg(long)]
    pub part_file: Option<PathBuf>,
    #[arg(long, default_value = "max")]
    pub norm: PartNorm,
    /// H x W 0/1 mask restricting the footprint
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output batch (.npy; a sidecar is written next to it)
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RoirArgs {
    /// Original batch: N x H x W x C, or N x C x S with a sidecar
    #[arg(long)]
    pub original: PathBuf,
    /// Edited batch, same layout as the original
    #[arg(long)]
    pub edited: PathBuf,
    /// H x W region-of-interest weights in [0, 1]
    #[arg(long)]
    pub mask: PathBuf,
    /// Also write the per-pixel squared-difference maps (N x H x W)
    #[arg(long)]
    pub mse_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Planted ground-truth directory written by `synth`
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Batch for the relative reconstruction error
    #[arg(long, short)]
    pub input: Option<PathBuf>,
}

/// Failure categories, mapped to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }
}

impl From<partsplit::Error> for CliError {
    fn from(e: partsplit::Error) -> Self {
        let kind = if e.is_numerical() {
            Kind::Numerical
        } else if matches!(e, partsplit::Error::InvalidConfig(_)) {
            Kind::Usage
        } else {
            Kind::Data
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn report(err: &CliError) -> ExitCode {
    let line = serde_json::json!({
        "error": err.kind.name(),
        "code": err.kind.code(),
        "message": err.message,
    });
    eprintln!("{line}");
    ExitCode::from(err.kind.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            return report(&CliError::usage(first));
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Decompose(a) => commands::decompose(&a),
        Command::Refine(a) => commands::refine(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Roir(a) => commands::roir(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
