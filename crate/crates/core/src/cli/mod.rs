//! `fedgraph` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage, config and I/O errors, 2 when training diverges.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::aggregation::AggregatorKind;
use crate::data::SplitName;
use crate::fedsim::Mode;

pub use commands::{cmd_compare, cmd_evaluate, cmd_generate, cmd_train};
pub use config::{RunManifest, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fedgraph",
    version,
    about = "Federated traffic-forecasting simulator with graph-aware aggregation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic series CSV and sensor graph CSV.
    Generate(GenerateArgs),
    /// Run a training job from a config file (or replay a manifest).
    Train(TrainArgs),
    /// Recompute metrics from saved checkpoints.
    Evaluate(EvaluateArgs),
    /// Run several methods over several seeds and summarize test metrics.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphShape {
    Ring,
    Grid,
    Er,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub nodes: usize,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "ring")]
    pub graph: GraphShape,
    /// Edge probability for `--graph er`.
    #[arg(long, default_value_t = 0.2)]
    pub edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Federated,
    Centralized,
    LocalOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Federated => Mode::Federated,
            ModeArg::Centralized => Mode::Centralized,
            ModeArg::LocalOnly => Mode::LocalOnly,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Config file (TOML).
    #[arg(required_unless_present = "replay", conflicts_with = "replay")]
    pub config: Option<PathBuf>,
    /// Rerun the job recorded in a manifest and check its final metrics.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Write the parameter matrix before and after every aggregation as CSV.
    #[arg(long)]
    pub dump_params: bool,
}

#[derive(Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long, value_parser = parse_aggregator)]
    pub aggregator: Option<AggregatorKind>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_aggregator(s: &str) -> Result<AggregatorKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    pub config: PathBuf,
    /// Checkpoint directory; defaults to `<output.dir>/checkpoints/final`.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    pub config: PathBuf,
    /// Comma-separated methods: fedavg, graphfedavg[:HOPS], mpfedavg[:ALPHA[:HOPS]], local_only, centralized.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fedavg,graphfedavg:1,mpfedavg:0.8:1,local_only,centralized"
    )]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Per-run CSV; defaults to `<output.dir>/comparison.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
