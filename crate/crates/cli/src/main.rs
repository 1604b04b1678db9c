//! `dsla` — command-line front end for the label-assignment toolkit.
//!
//! Subcommands cover the full pipeline: `assign` writes per-image target
//! tables, `curves` dumps classification gradient curves, `simulate` trains
//! the desk-scale predictor under each label scheme, `nms` filters a
//! detection file, and `stats` summarizes an assignment file.
//!
//! Exit codes: 0 on success, 1 when a computation fails (for example a
//! diverging training run), 2 for usage and input errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsla_core::assigner::AssignMode;
use dsla_core::inference::RankMode;
use dsla_core::simulator::TrainMode;

use commands::{parse_assign_mode, parse_rank_mode, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "dsla",
    version,
    about = "Dynamic smooth label assignment toolkit"
)]
pub struct Cli {
    /// JSON config file; omitted sections and fields fall back to defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed override, propagated to scene generation and training. Only the
    /// simulator draws randomness; without this flag the config's scene seed
    /// applies (42 by default).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign ground-truth boxes of a dataset to the location grid and write
    /// one target table per image.
    Assign(AssignArgs),
    /// Dump focal and quality-focal gradient curves over the probability
    /// grid.
    Curves(CurvesArgs),
    /// Train the synthetic-scene predictor under the configured label
    /// schemes and write reports, traces and a comparison summary.
    Simulate(SimulateArgs),
    /// Filter a detection file with greedy non-maximum suppression.
    Nms(NmsArgs),
    /// Summarize an assignment file (positives per level, label histogram,
    /// ambiguity count) as JSON on standard output.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    /// Dataset JSON (`images` + `annotations` arrays).
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,

    /// Assignment rule; overrides the config (`fcos-hard` or `dsla-smooth`).
    #[arg(long, value_parser = parse_assign_mode)]
    pub mode: Option<AssignMode>,

    /// Also write one `label_s` heatmap (PGM) per image and level.
    #[arg(long)]
    pub heatmaps: bool,

    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Soft targets for the quality-focal columns, e.g. `--y 0.3,0.7`.
    #[arg(long, value_delimiter = ',', value_name = "Y")]
    pub y: Vec<f64>,

    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Label scheme to run; repeatable. Defaults to all three
    /// (`fl-hard`, `gfl-smooth-static`, `gfl-dsla-dynamic`).
    #[arg(long, value_name = "MODE")]
    pub mode: Vec<TrainMode>,

    /// Iteration override; `0` reports the untrained baseline.
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,

    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    /// Detection CSV to filter.
    #[arg(long, value_name = "FILE")]
    pub detections: PathBuf,

    /// Ranking rule: `dsla` (classification score) or `fcos` (score times
    /// quality; requires a quality column).
    #[arg(long, default_value = "dsla", value_parser = parse_rank_mode)]
    pub mode: RankMode,

    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Assignment CSV to summarize.
    #[arg(long, value_name = "FILE")]
    pub assignments: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Assign(args) => commands::cmd_assign(&cli, args),
        Command::Curves(args) => commands::cmd_curves(&cli, args),
        Command::Simulate(args) => commands::cmd_simulate(&cli, args),
        Command::Nms(args) => commands::cmd_nms(&cli, args),
        Command::Stats(args) => commands::cmd_stats(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
