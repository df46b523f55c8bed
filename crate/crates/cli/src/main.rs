//! `surrogate`: designs, testbed runs, metamodel fits and their diagnostics.
//!
//! Exit codes: 0 success, 1 verification mismatch, 2 input or I/O error,
//! 3 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "surrogate", version, about = "Surrogate models and diagnostics for simulation codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct SpaceArg {
    /// CSV of `name,min,max` rows; defaults to the 11-parameter fuel-pin space.
    #[arg(long)]
    pub space: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ManagerArgs {
    /// Code manager settings (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preprocessor version (v1 or v2).
    #[arg(long)]
    pub pre: Option<String>,
    /// Postprocessor version (v1 or v2).
    #[arg(long)]
    pub post: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub failure_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Latin hypercube design with maximin improvement.
    Design {
        #[command(flatten)]
        space: SpaceArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        sweeps: usize,
        /// Feasibility predicate: `pin-geometry` or `none`. Defaults to
        /// `pin-geometry` on the fuel-pin space and `none` otherwise.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a design with the testbed code manager.
    Run {
        #[command(flatten)]
        manager: ManagerArgs,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a metamodel on a base.
    Fit {
        /// kriging, kernel or mlp.
        #[arg(long)]
        method: String,
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        space: SpaceArg,
        /// Fit settings (JSON with `kriging`, `kernel`, `mlp`, `mlp_widths`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prediction criteria of a model on a test base.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Output prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning-base runs ranked by normalized leave-one-out error.
    Outliers {
        #[arg(long)]
        model: PathBuf,
        /// Learning base the model was fitted on; adds its warnings to the ranking.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Rows to keep; 0 keeps all.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the code along a segment of the normalized space.
    Scan {
        /// Start point, comma-separated normalized coordinates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        a: Vec<f64>,
        /// End point, comma-separated normalized coordinates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        b: Vec<f64>,
        #[arg(long, default_value_t = 97)]
        count: usize,
        #[command(flatten)]
        manager: ManagerArgs,
        /// Add predictions and 95% bands from this model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROC curve of the safety classifier on a test base.
    Roc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 300.0)]
        threshold: f64,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a manifest and compare its outputs byte for byte.
    Verify {
        manifest: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<surrogate_core::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
        if cause.downcast_ref::<commands::Mismatch>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match commands::execute(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
