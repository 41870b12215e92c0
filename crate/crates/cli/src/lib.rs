//! The `ogan` command: dataset generation, training, evaluation, sampling and
//! plotting driven by one TOML experiment file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod plot;
mod provenance;

pub use commands::run;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EXISTS: i32 = 3;
pub const EXIT_NONFINITE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error(transparent)]
    Core(#[from] ogan_core::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ogan_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Exists(_) => EXIT_EXISTS,
            CliError::Core(E::NonFinite { .. }) => EXIT_NONFINITE,
            CliError::Core(E::Config(_) | E::Ontology(_) | E::DatasetSpec(_)) => EXIT_CONFIG,
            CliError::Core(_) | CliError::Other(_) => EXIT_OTHER,
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Parser)]
#[command(name = "ogan", version, about = "Ontology-conditioned progressive GAN experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the config's output root.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Train the frozen feature extractor used by FID and IS.
    TrainExtractor,
    /// Train the text-to-label predictor used at sampling time.
    TrainLabelnet,
    /// Train the GAN (or the category-only baseline).
    Train {
        #[arg(long)]
        baseline: bool,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_name = "N")]
        max_steps: Option<u64>,
    },
    /// Score checkpoints and print a side-by-side IS/FID table.
    Eval {
        #[arg(required = true, value_name = "CHECKPOINT")]
        checkpoints: Vec<PathBuf>,
    },
    /// Generate a grid of images for a description.
    Sample {
        /// Defaults to the O-GAN run's final checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Free-text description to condition on
        #[arg(long)]
        text: String,
        /// Sub-category name; bypasses the label predictor.
        #[arg(long, value_name = "NAME")]
        label: Option<String>,
        /// Number of images in the grid
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Per-epoch conditioning-loss plots from training logs.
    Plot {
        #[arg(required = true, value_name = "LOG")]
        logs: Vec<PathBuf>,
    },
}
