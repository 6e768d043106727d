//! Command-line experiment driver: benchmark runs, sparsity sweeps, bound
//! verification, normalizer validation and ablations.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Exit;

#[derive(Parser, Debug)]
#[command(name = "grmoe", version, about = "Grassmannian MoE routing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; every field has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seeds, e.g. `0,3,7` or `0..20`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Repeat the run described by a previously written manifest.
    #[arg(long, conflicts_with_all = ["config", "seeds"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and evaluate every configured method over the seed list.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Entropy, effective experts and accuracy of a checkpoint across α.
    AlphaSweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint JSON written by `bench`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated α values.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Randomized check of the entropy and top-k mass bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
    /// Saddle-point and Monte-Carlo normalizers against the exact series.
    ZValidate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated κ grid.
        #[arg(long)]
        kappas: Option<String>,
    },
    /// Sweep one training hyperparameter.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// beta, rho0, rank or sampled_pairs.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long)]
        values: Option<String>,
    },
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => commands::dispatch(cli.command) as i32,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Exit::Usage as i32
            } else {
                Exit::Success as i32
            }
        }
    }
}
