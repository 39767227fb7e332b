//! Command-line orchestration: `search`, `lug build`, `eval`, `cost`,
//! `sweep`. Exit codes: 0 success, 2 usage/configuration error, 3 runtime
//! abort.

mod commands;
pub mod config;
pub mod manifest;
pub mod metrics;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use config::{load_dataset, parse_constraint, parse_grid, Settings};
pub use manifest::RunManifest;
pub use metrics::MetricsWriter;

#[derive(Parser, Debug)]
#[command(
    name = "dcanas",
    version,
    about = "Differentiable architecture search under device resource constraints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Configuration file ([section] headers, key=value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset: spiral[:k=v,..] | moons[:..] | blobs[:..] | mnist:<dir> | cifar10:<dir>.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Keep only the first N records of a file-backed dataset.
    #[arg(long)]
    pub take: Option<usize>,
    /// Cost metric: params | flops.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature flag toggles applied to the all-on default, e.g. `-ws,-cb,-dc,-rc`.
    #[arg(long, allow_hyphen_values = true)]
    pub flags: Option<String>,
    /// Zero wall-clock fields in artifacts so reruns are byte-identical.
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    /// Output directory (default: runs/<run-id>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Device constraint K_d, e.g. 2K / 3.5M (params) or 3MF / 2GF (flops).
    #[arg(long)]
    pub constraint: Option<String>,
    /// Lookup graph file mapping K_d to the search constraint K_d'.
    #[arg(long)]
    pub lug: Option<PathBuf>,
    /// Search constraint K_d' given directly (bypasses the lookup graph).
    #[arg(long)]
    pub kd_prime: Option<f64>,
    /// Search epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum LugAction {
    /// Calibrate a lookup graph by searching over a K_d' grid.
    Build(LugBuildArgs),
}

#[derive(Args, Debug)]
pub struct LugBuildArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Grid: `lo:hi:n` (geometric), an explicit `a,b,c` list, or `auto[:n]`
    /// (anchored at 0.25x..1.5x of an unconstrained search's k_s).
    #[arg(long, default_value = "auto")]
    pub grid: String,
    /// Searches per grid point (measured K_d is their median).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Concurrent searches (also capped by DCANAS_THREADS).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Search epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output LUG file path.
    #[arg(long)]
    pub lug_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Genotype file to instantiate and train.
    #[arg(long)]
    pub genotype: PathBuf,
    /// Evaluation epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Genotype file to price.
    #[arg(long)]
    pub genotype: PathBuf,
    /// Cost metric: params | flops.
    #[arg(long, default_value = "params")]
    pub metric: String,
    /// Initial channels of the evaluation network.
    #[arg(long)]
    pub channels: usize,
    /// Number of stacked cells (layers) of the evaluation network.
    #[arg(long)]
    pub cells: usize,
    #[arg(long, default_value_t = 1)]
    pub in_channels: usize,
    /// Input spatial size, e.g. 16x16.
    #[arg(long, default_value = "16x16")]
    pub input: String,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma list of device constraints, e.g. 2K,4K,8K.
    #[arg(long)]
    pub constraints: Option<String>,
    /// Comma list of seeds, e.g. 1,2,3.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    /// Lookup graph used to translate each constraint.
    #[arg(long)]
    pub lug: Option<PathBuf>,
    /// Sweep feature-flag combinations instead of constraints (timing study).
    #[arg(long, default_value_t = false)]
    pub ablate: bool,
    /// Concurrent runs (also capped by DCANAS_THREADS); timing sweeps force 1.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Search epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    Search(SearchArgs),
    #[command(subcommand)]
    Lug(LugAction),
    Eval(EvalArgs),
    Cost(CostArgs),
    Sweep(SweepArgs),
}

/// 0 on success, 2 for usage/config problems, 3 for runtime aborts.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::UnknownOp(_) | Error::Io(_) => 2,
        Error::ShapeMismatch { .. }
        | Error::NonScalarLoss { .. }
        | Error::MissingGrad { .. }
        | Error::NonFiniteLoss(_) => 3,
    }
}

pub fn run_from_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match commands::dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
