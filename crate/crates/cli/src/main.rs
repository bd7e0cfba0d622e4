//! `radpos`: phantom generation, training, inference, fusion and reporting.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::SplitChoice;
use radpos::classifier::InputLayout;

#[derive(Debug, Parser)]
#[command(name = "radpos", version, about = "Radiologist-positive classification and decision fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LayoutArg {
    T2,
    Bpmr,
}

impl From<LayoutArg> for InputLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::T2 => InputLayout::T2,
            LayoutArg::Bpmr => InputLayout::Bpmr,
        }
    }
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML file with optional [phantom], [train] and [pipeline] tables.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    /// Radiologist score at or above which an ROI is radiologist-positive.
    #[arg(long)]
    cutoff: Option<u8>,
    /// Minimum grade group counted as clinically significant.
    #[arg(long)]
    grade_min: Option<u8>,
    /// Comma-separated positive-fraction thresholds in [0, 1].
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Comma-separated sensitivities at which to report specificity.
    #[arg(long, value_delimiter = ',')]
    controlled_sen: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (images, ROIs, biopsies, truth).
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of patients.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the voxel classifier on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Cohort manifest, or the directory holding it.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write probability maps for the selected split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion counts at one cutoff for each threshold.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        /// Directory of probability maps written by `infer`.
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Radiologist curve over cutoffs plus ML and fused curves over thresholds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add specificity at controlled sensitivities to a sweep.
    Report {
        #[command(flatten)]
        common: Common,
        /// CSV written by `sweep` or `fuse`.
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in fusion-identity and interpolation checks.
    Selftest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
