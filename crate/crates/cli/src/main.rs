//! Command line front end: `localize`, `synth`, `eval`, and `ablate`
//! subcommands over the maloc solver.
//!
//! Exit codes: 0 on success, 2 when any query carries a soft-failure flag
//! (or produced no pose), 1 on hard errors.

mod ablate;
mod config;
mod synthspec;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maloc_core::geom::Pose;
use maloc_core::io::{
    load_poses, load_problem, load_report, save_poses, save_problem, save_report, ReportFormat,
};
use maloc_core::metrics::{self, RECALL_THRESHOLDS};
use maloc_core::pipeline::{localize, validate, SolveReport};
use maloc_core::synth;
use maloc_core::ImageId;

#[derive(Parser)]
#[command(
    name = "maloc",
    about = "Visual localization against posed database images by anchored robust motion averaging",
    after_help = config::help_text()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve query poses for a problem bundle directory.
    Localize {
        /// Problem bundle directory.
        problem_dir: PathBuf,
        /// Run config file (flat key-value; see --help for keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Global RNG seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Solve mode: independent | colocalize | rig.
        #[arg(long)]
        mode: Option<String>,
        /// Report output path.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Report format: csv | table.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Ground-truth query poses; adds per-stage error columns.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Worker threads (0 = machine parallelism).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate a synthetic scene bundle plus ground truth.
    #[command(after_help = synthspec::help_text())]
    Synth {
        /// Scene spec file (flat key-value).
        spec: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a report against ground-truth poses.
    Eval {
        /// Report CSV written by `localize`.
        #[arg(long)]
        report: PathBuf,
        /// Ground-truth query pose file.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Meters per scene unit, for the centimeter readout.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Run a synthetic ablation suite and print its comparison table.
    Ablate {
        /// Suite: translation | postopt | noise | topk | multiquery | rig.
        #[arg(long)]
        suite: String,
        /// Seeded trials per variant.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Base seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Localize {
            problem_dir,
            config,
            seed,
            mode,
            out,
            format,
            ground_truth,
            threads,
        } => cmd_localize(
            &problem_dir,
            config.as_deref(),
            seed,
            mode.as_deref(),
            &out,
            &format,
            ground_truth.as_deref(),
            threads,
        ),
        Cmd::Synth { spec, out } => cmd_synth(&spec, &out),
        Cmd::Eval { report, ground_truth, scale } => cmd_eval(&report, &ground_truth, scale),
        Cmd::Ablate { suite, trials, seed, out } => {
            let table = ablate::run_suite(&suite, trials, seed)?;
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| format!("cannot write {path:?}: {e}"))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_localize(
    problem_dir: &Path,
    config_path: Option<&Path>,
    seed: Option<u64>,
    mode: Option<&str>,
    out: &Path,
    format: &str,
    ground_truth: Option<&Path>,
    threads: Option<usize>,
) -> Result<ExitCode, String> {
    let mut run_cfg = match config_path {
        Some(p) => config::load_config(p)?,
        None => config::RunConfig::default(),
    };
    if let Some(s) = seed {
        run_cfg.solver.seed = s;
    }
    if let Some(m) = mode {
        run_cfg.solver.mode = config::parse_mode(m)?;
    }
    if let Some(t) = threads {
        run_cfg.threads = t;
    }
    if run_cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(run_cfg.threads).build_global();
    }
    let report_format = match format {
        "csv" => ReportFormat::Csv,
        "table" => ReportFormat::TextTable,
        other => return Err(format!("unknown report format `{other}`")),
    };

    let problem = load_problem(problem_dir).map_err(|e| e.to_string())?;
    let diagnosis = validate(&problem);
    for (q, d) in &diagnosis {
        if d.disconnected {
            eprintln!("query {q}: no pairs at all (disconnected)");
        } else if d.scale_unobservable_candidate {
            eprintln!("query {q}: fewer than 2 retrieval pairs; scale likely unobservable");
        }
    }

    let gt = match ground_truth {
        Some(p) => Some(load_poses(p).map_err(|e| e.to_string())?),
        None => None,
    };
    let report = localize(&problem, &run_cfg.solver).map_err(|e| e.to_string())?;
    save_report(&report, out, report_format, gt.as_ref()).map_err(|e| e.to_string())?;

    print_summary(&report);
    if let Some(gt) = &gt {
        print_eval(&eval_errors(&report, gt), 1.0);
    }

    let soft_failure = report.queries.values().any(|q| {
        q.final_pose.is_none()
            || q.flags.scale_unobservable
            || q.flags.degenerate_geometry
            || q.flags.no_tracks
            || q.flags.disconnected
            || q.flags.rank_deficient
    });
    Ok(if soft_failure { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn print_summary(report: &SolveReport) {
    let solved = report.queries.values().filter(|q| q.final_pose.is_some()).count();
    println!(
        "solved {solved}/{} queries ({} edges dropped)",
        report.queries.len(),
        report.dropped_edges.len()
    );
    for ((a, b), reason) in &report.dropped_edges {
        eprintln!("dropped pair ({a}, {b}): {reason}");
    }
    let t = &report.timings;
    println!(
        "timings: two-view {:.1} ms, rotation {:.1} ms, translation {:.1} ms, post {:.1} ms",
        t.two_view_ms, t.rotation_ms, t.translation_ms, t.post_ms
    );
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<ExitCode, String> {
    let (spec, top_k) = synthspec::load_spec(spec_path)?;
    let scene = synth::generate(&spec).map_err(|e| e.to_string())?;
    let problem = synth::make_problem(&scene, top_k);
    save_problem(&problem, out).map_err(|e| e.to_string())?;
    save_poses(&out.join("gt_poses.txt"), &scene.ground_truth()).map_err(|e| e.to_string())?;
    println!(
        "wrote bundle with {} database images, {} queries, {} pairs to {}",
        problem.database.len(),
        problem.queries.len(),
        problem.retrieval_pairs.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_errors(
    report: &SolveReport,
    gt: &BTreeMap<ImageId, Pose>,
) -> Vec<Option<(f64, f64)>> {
    report
        .queries
        .iter()
        .map(|(id, q)| {
            let truth = gt.get(id)?;
            q.final_pose.map(|p| {
                (
                    metrics::position_error(&p, truth),
                    metrics::rotation_error_deg(&p.rotation, &truth.rotation),
                )
            })
        })
        .collect()
}

fn print_eval(errors: &[Option<(f64, f64)>], scale: f64) {
    let summary = metrics::summarize(errors);
    println!("queries evaluated: {} (no pose: {})", summary.n, summary.n_failed);
    match (summary.median_position, summary.median_rotation_deg) {
        (Some(p), Some(r)) => {
            println!(
                "median translation error: {:.6} units ({:.2} cm at {} m/unit)",
                p,
                p * scale * 100.0,
                scale
            );
            println!("median rotation error: {r:.4} deg");
        }
        _ => println!("no solved queries to evaluate"),
    }
    for (i, (tp, tr)) in RECALL_THRESHOLDS.iter().enumerate() {
        println!(
            "recall @ ({:.2} u, {:.0} deg): {:.1}%",
            tp,
            tr,
            summary.recalls[i] * 100.0
        );
    }
}

fn cmd_eval(report_path: &Path, gt_path: &Path, scale: f64) -> Result<ExitCode, String> {
    let rows = load_report(report_path).map_err(|e| e.to_string())?;
    let gt = load_poses(gt_path).map_err(|e| e.to_string())?;
    let errors: Vec<Option<(f64, f64)>> = rows
        .iter()
        .map(|row| {
            let truth = gt.get(&row.query)?;
            row.final_pose.map(|p| {
                (
                    metrics::position_error(&p, truth),
                    metrics::rotation_error_deg(&p.rotation, &truth.rotation),
                )
            })
        })
        .collect();
    print_eval(&errors, scale);
    Ok(ExitCode::SUCCESS)
}
