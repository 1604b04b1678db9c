//! Subcommand implementations.
//!
//! Every command follows the same shape: load and validate all inputs,
//! plan the output paths and refuse to overwrite without `--force`, then
//! compute and write atomically. Input problems surface as usage errors
//! (exit 2), failures of the computation itself as runtime errors (exit 1).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dsla_core::assigner::{assign_all, AssignMode};
use dsla_core::dataio::{
    assignment_stats, load_config, load_dataset, read_assignments_csv, read_detections_csv,
    write_assignments_csv, write_atomic, write_curves_csv, write_detections_csv, write_heatmap,
    write_json, ToolConfig,
};
use dsla_core::inference::{greedy_nms_indices, rank_score, Detection, RankMode};
use dsla_core::losses::{default_probability_grid, gpart_curves, DEFAULT_GFL_TARGETS};
use dsla_core::simulator::{make_scene, train, RunReport, TrainMode};
use serde::Serialize;

use crate::{AssignArgs, Cli, CurvesArgs, NmsArgs, SimulateArgs, StatsArgs};

/// Command failure split by exit code: usage/input problems exit with 2,
/// computation failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Failure(anyhow::Error),
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn failure(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Failure(e.into())
}

/// Clap-facing parser for [`AssignMode`].
pub fn parse_assign_mode(s: &str) -> Result<AssignMode, String> {
    match s {
        "fcos-hard" => Ok(AssignMode::FcosHard),
        "dsla-smooth" => Ok(AssignMode::DslaSmooth),
        other => Err(format!(
            "unknown assignment mode `{other}` (expected fcos-hard or dsla-smooth)"
        )),
    }
}

/// Clap-facing parser for [`RankMode`].
pub fn parse_rank_mode(s: &str) -> Result<RankMode, String> {
    match s {
        "dsla" => Ok(RankMode::Dsla),
        "fcos" => Ok(RankMode::Fcos),
        other => Err(format!(
            "unknown ranking mode `{other}` (expected dsla or fcos)"
        )),
    }
}

/// Loads the tool config, or the all-defaults config when no path was given.
fn tool_config(cli: &Cli) -> CliResult<ToolConfig> {
    match &cli.config {
        Some(path) => load_config(path).map_err(usage),
        None => Ok(ToolConfig::default()),
    }
}

/// Refuses to clobber existing files unless `--force` was given.
fn ensure_fresh(paths: &[PathBuf], force: bool) -> CliResult {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(usage(anyhow!(
                "{} already exists (pass --force to overwrite)",
                path.display()
            )));
        }
    }
    Ok(())
}

fn create_out_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| failure(anyhow!("cannot create {}: {e}", dir.display())))
}

/// Lossless float cell for the CSV outputs written directly by the CLI.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Prints one line to standard output, ignoring a closed pipe (so that
/// `dsla stats ... | head` behaves like any other Unix tool).
fn emit(line: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

// ---------------------------------------------------------------------------
// assign
// ---------------------------------------------------------------------------

pub fn cmd_assign(cli: &Cli, args: &AssignArgs) -> CliResult {
    let mut config = tool_config(cli)?;
    if let Some(mode) = args.mode {
        config.assigner.mode = mode;
    }
    let records = load_dataset(&args.dataset).map_err(usage)?;

    // plan every output path up front; image ids name the files, so repeats
    // would silently overwrite each other
    let levels = config.assigner.strides.len();
    let mut planned = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if records[..i].iter().any(|prev| prev.id == r.id) {
            return Err(usage(anyhow!("dataset repeats image id {}", r.id)));
        }
        planned.push(args.out.join(format!("assignments_{}.csv", r.id)));
        if args.heatmaps {
            for level in 0..levels {
                planned.push(
                    args.out
                        .join(format!("heatmap_{}_level{}.pgm", r.id, level)),
                );
            }
        }
    }
    ensure_fresh(&planned, cli.force)?;
    create_out_dir(&args.out)?;

    let mut heatmaps = 0usize;
    for r in &records {
        let table =
            assign_all(&r.gt_boxes, (r.width, r.height), &config.assigner).map_err(failure)?;
        let csv_path = args.out.join(format!("assignments_{}.csv", r.id));
        write_assignments_csv(&csv_path, &table).map_err(failure)?;
        if args.heatmaps {
            for level in &table.levels {
                let values: Vec<f64> = level.targets.iter().map(|t| t.label_s).collect();
                let path = args
                    .out
                    .join(format!("heatmap_{}_level{}.pgm", r.id, level.level));
                write_heatmap(&path, level.ncols, level.nrows, &values).map_err(failure)?;
                heatmaps += 1;
            }
        }
    }
    emit(format_args!(
        "wrote {} assignment table(s) and {} heatmap(s) to {}",
        records.len(),
        heatmaps,
        args.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

pub fn cmd_curves(cli: &Cli, args: &CurvesArgs) -> CliResult {
    let config = tool_config(cli)?;
    let y_values: Vec<f64> = if args.y.is_empty() {
        DEFAULT_GFL_TARGETS.to_vec()
    } else {
        args.y.clone()
    };
    for &y in &y_values {
        if !(0.0..=1.0).contains(&y) || y.is_nan() {
            return Err(usage(anyhow!("--y values must lie in [0, 1], got {y}")));
        }
    }

    let path = args.out.join("curves.csv");
    ensure_fresh(std::slice::from_ref(&path), cli.force)?;
    create_out_dir(&args.out)?;

    let curves =
        gpart_curves(&default_probability_grid(), &y_values, &config.loss).map_err(failure)?;
    write_curves_csv(&path, &curves).map_err(failure)?;
    emit(format_args!("wrote {}", path.display()));
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Per-mode block of the comparison summary. A failed run carries only the
/// error message; a finished run carries its final metrics.
#[derive(Debug, Serialize)]
struct ModeSummary {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundary_gap: Option<f64>,
    /// `None` also for finished runs when fewer than two detections overlap
    /// any ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    ranking_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_gradient_conflict: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    positives: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    seed: u64,
    iterations: usize,
    modes: Vec<ModeSummary>,
}

/// `iteration,loss,gradient_conflict,mean_positive_target` rows of one run.
fn trace_csv(report: &RunReport) -> String {
    let mut out = String::from("iteration,loss,gradient_conflict,mean_positive_target\n");
    for i in 0..report.iterations {
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            fmt_f64(report.loss_trace[i]),
            fmt_f64(report.conflict_trace[i]),
            fmt_f64(report.positive_target_trace[i]),
        );
    }
    out
}

pub fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> CliResult {
    let mut config = tool_config(cli)?;
    if let Some(seed) = cli.seed {
        config.simulator.scene.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.simulator.iterations = iterations;
    }
    let modes: Vec<TrainMode> = if args.mode.is_empty() {
        TrainMode::ALL.to_vec()
    } else {
        args.mode.clone()
    };
    for (i, mode) in modes.iter().enumerate() {
        if modes[..i].contains(mode) {
            return Err(usage(anyhow!("--mode {mode} given twice")));
        }
    }

    let scene = make_scene(&config.simulator.scene).map_err(usage)?;

    let mut planned = vec![args.out.join("summary.json")];
    for mode in &modes {
        planned.push(args.out.join(format!("report_{mode}.json")));
        planned.push(args.out.join(format!("trace_{mode}.csv")));
    }
    ensure_fresh(&planned, cli.force)?;
    create_out_dir(&args.out)?;

    // a diverging mode is reported in the summary without aborting the
    // others; it still fails the invocation at the end
    let mut summary = SimulateSummary {
        seed: config.simulator.scene.seed,
        iterations: config.simulator.iterations,
        modes: Vec::with_capacity(modes.len()),
    };
    let mut failed = 0usize;
    for &mode in &modes {
        let train_config = config.train_config(mode);
        match train(&scene, &train_config) {
            Ok(report) => {
                write_json(&args.out.join(format!("report_{mode}.json")), &report)
                    .map_err(failure)?;
                write_atomic(
                    &args.out.join(format!("trace_{mode}.csv")),
                    trace_csv(&report).as_bytes(),
                )
                .map_err(failure)?;
                let conflict_mean = if report.conflict_trace.is_empty() {
                    0.0
                } else {
                    report.conflict_trace.iter().sum::<f64>() / report.conflict_trace.len() as f64
                };
                emit(format_args!(
                    "{mode}: final_loss {:.6} boundary_gap {:.6} ranking {} positives {}",
                    report.final_loss,
                    report.boundary_gap,
                    report
                        .ranking_correlation
                        .map_or_else(|| "n/a".into(), |v| format!("{v:.6}")),
                    report.positives,
                ));
                summary.modes.push(ModeSummary {
                    mode: mode.name(),
                    error: None,
                    final_loss: Some(report.final_loss),
                    boundary_gap: Some(report.boundary_gap),
                    ranking_correlation: report.ranking_correlation,
                    mean_gradient_conflict: Some(conflict_mean),
                    positives: Some(report.positives),
                });
            }
            Err(e) => {
                eprintln!("{mode}: {e}");
                failed += 1;
                summary.modes.push(ModeSummary {
                    mode: mode.name(),
                    error: Some(e.to_string()),
                    final_loss: None,
                    boundary_gap: None,
                    ranking_correlation: None,
                    mean_gradient_conflict: None,
                    positives: None,
                });
            }
        }
    }
    write_json(&args.out.join("summary.json"), &summary).map_err(failure)?;
    emit(format_args!(
        "wrote {}",
        args.out.join("summary.json").display()
    ));

    if failed > 0 {
        return Err(failure(anyhow!(
            "{failed} of {} mode(s) failed",
            modes.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// nms
// ---------------------------------------------------------------------------

pub fn cmd_nms(cli: &Cli, args: &NmsArgs) -> CliResult {
    let config = tool_config(cli)?;
    let detections = read_detections_csv(&args.detections).map_err(usage)?;
    for (i, d) in detections.iter().enumerate() {
        if !d.score.is_finite() {
            return Err(usage(anyhow!(
                "detection {i}: score {} is not finite",
                d.score
            )));
        }
        if matches!(d.quality, Some(q) if !q.is_finite()) {
            return Err(usage(anyhow!("detection {i}: quality is not finite")));
        }
        if args.mode == RankMode::Fcos && d.quality.is_none() {
            return Err(usage(anyhow!(
                "detection {i} has no quality column, which fcos ranking requires"
            )));
        }
    }

    let path = args.out.join("detections.csv");
    ensure_fresh(std::slice::from_ref(&path), cli.force)?;
    create_out_dir(&args.out)?;

    // rank with the selected rule, but write the survivors unchanged
    let ranked: Vec<Detection> = detections
        .iter()
        .map(|d| {
            rank_score(d.score, d.quality, args.mode).map(|score| Detection { score, ..d.clone() })
        })
        .collect::<Result<_, _>>()
        .map_err(failure)?;
    let kept_idx = greedy_nms_indices(&ranked, &config.nms).map_err(failure)?;
    let kept: Vec<Detection> = kept_idx.iter().map(|&i| detections[i].clone()).collect();

    let with_quality = !kept.is_empty() && kept.iter().all(|d| d.quality.is_some());
    write_detections_csv(&path, &kept, with_quality).map_err(failure)?;
    emit(format_args!(
        "kept {} suppressed {}",
        kept.len(),
        detections.len() - kept.len()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

pub fn cmd_stats(_cli: &Cli, args: &StatsArgs) -> CliResult {
    let table = read_assignments_csv(&args.assignments).map_err(usage)?;
    let stats = assignment_stats(&table).map_err(failure)?;
    let body = serde_json::to_string_pretty(&stats).map_err(failure)?;
    emit(format_args!("{body}"));
    Ok(())
}
