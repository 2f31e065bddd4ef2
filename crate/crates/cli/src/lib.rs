//! Command-line front end: phantom synthesis, preprocessing, training,
//! evaluation, explanation and self-checks.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "nlran", version, about = "3-D residual attention network with a non-local block for CT classification")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Record that bit-reproducible execution was requested.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print the resolved configuration and exit without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Attention,
    Cam,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Resnet,
    Resmix3,
    Resmix6,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled phantom dataset with lesion masks.
    Synth {
        /// Number of volumes; classes are balanced.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Mask, crop and slice-resample every scan of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train on the train split and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Metrics, ROC/PR curves and scores for one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Heat maps for one scan.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scan: String,
        #[arg(long, value_enum, default_value = "both")]
        method: Method,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
    /// Parameter count, FLOPs and stage shapes.
    Inspect {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}
