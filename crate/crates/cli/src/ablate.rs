//! Synthetic ablation suites: translation objective, post-optimization
//! variants, database noise sensitivity, retrieval depth, multi-query
//! co-localization, and camera rigs. Each suite prints a comparison table
//! of median errors over seeded trials.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use maloc_core::geom::Pose;
use maloc_core::metrics;
use maloc_core::pipeline::{
    estimate_edges, localize, solve_with_edges, PostMode, SolveMode, SolverConfig,
};
use maloc_core::synth::{self, SceneSpec, SyntheticScene};
use maloc_core::transavg::TranslationObjective;
use maloc_core::ImageId;

fn noisy_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        n_database: 12,
        n_queries: 4,
        n_points: 200,
        pixel_noise_sigma: 1.0,
        match_outlier_rate: 0.2,
        edge_outlier_rate: 0.15,
        seed,
        ..Default::default()
    }
}

fn base_config(seed: u64) -> SolverConfig {
    SolverConfig { seed, ransac_max_iterations: 1000, ..Default::default() }
}

/// Per-query (position, rotation-degrees) errors of the solved queries.
fn errors_of(
    report: &maloc_core::pipeline::SolveReport,
    gt: &BTreeMap<ImageId, Pose>,
) -> Vec<(f64, f64)> {
    report
        .queries
        .iter()
        .filter_map(|(id, q)| {
            q.final_pose.map(|p| {
                let t = &gt[id];
                (
                    metrics::position_error(&p, t),
                    metrics::rotation_error_deg(&p.rotation, &t.rotation),
                )
            })
        })
        .collect()
}

struct Variant {
    name: String,
    per_trial: Vec<f64>,
    all_pos: Vec<f64>,
    all_rot: Vec<f64>,
}

impl Variant {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), per_trial: Vec::new(), all_pos: Vec::new(), all_rot: Vec::new() }
    }

    fn record(&mut self, errors: &[(f64, f64)]) {
        let pos: Vec<f64> = errors.iter().map(|e| e.0).collect();
        self.per_trial.push(metrics::median(&pos).unwrap_or(f64::NAN));
        self.all_pos.extend(errors.iter().map(|e| e.0));
        self.all_rot.extend(errors.iter().map(|e| e.1));
    }
}

fn print_table(variants: &[Variant], reference: usize) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<24} {:>14} {:>14} {:>12}",
        "variant", "median pos", "median rot deg", "win rate"
    )
    .unwrap();
    let ref_trials = variants[reference].per_trial.clone();
    for (i, v) in variants.iter().enumerate() {
        let wins = if i == reference {
            String::from("-")
        } else {
            let n = ref_trials
                .iter()
                .zip(&v.per_trial)
                .filter(|(r, x)| r.is_finite() && x.is_finite() && r < x)
                .count();
            format!("{n}/{}", ref_trials.len())
        };
        writeln!(
            out,
            "{:<24} {:>14.6} {:>14.6} {:>12}",
            v.name,
            metrics::median(&v.all_pos).unwrap_or(f64::NAN),
            metrics::median(&v.all_rot).unwrap_or(f64::NAN),
            wins
        )
        .unwrap();
    }
    out
}

pub fn run_suite(suite: &str, trials: usize, seed: u64) -> Result<String, String> {
    match suite {
        "translation" => Ok(suite_translation(trials, seed)),
        "postopt" => Ok(suite_postopt(trials, seed)),
        "noise" => Ok(suite_noise(trials, seed)),
        "topk" => Ok(suite_topk(trials, seed)),
        "multiquery" => Ok(suite_multiquery(trials, seed)),
        "rig" => Ok(suite_rig(trials, seed)),
        other => Err(format!(
            "unknown suite `{other}` (expected translation, postopt, noise, topk, multiquery, rig)"
        )),
    }
}

fn suite_postopt(trials: usize, seed: u64) -> String {
    let modes = [
        ("full", PostMode::Full),
        ("w/o opt", PostMode::None),
        ("sampson", PostMode::Sampson),
        ("local opt", PostMode::LocalOpt),
    ];
    let mut variants: Vec<Variant> = modes.iter().map(|(n, _)| Variant::new(n)).collect();
    for t in 0..trials {
        let scene = synth::generate(&noisy_spec(seed + t as u64)).unwrap();
        let problem = synth::make_problem(&scene, 8);
        let gt = scene.ground_truth();
        let config = base_config(seed + t as u64);
        let edges = estimate_edges(&problem, &config);
        for (v, (_, mode)) in variants.iter_mut().zip(&modes) {
            let cfg = SolverConfig { post_mode: *mode, ..config.clone() };
            let report = solve_with_edges(&problem, &edges, &cfg).unwrap();
            v.record(&errors_of(&report, &gt));
        }
    }
    print_table(&variants, 0)
}

fn suite_translation(trials: usize, seed: u64) -> String {
    let modes = [
        ("angular + post", TranslationObjective::Angular, PostMode::Full),
        ("lud + post", TranslationObjective::Lud, PostMode::Full),
        ("angular, no post", TranslationObjective::Angular, PostMode::None),
        ("lud, no post", TranslationObjective::Lud, PostMode::None),
    ];
    let mut variants: Vec<Variant> = modes.iter().map(|(n, _, _)| Variant::new(n)).collect();
    for t in 0..trials {
        let scene = synth::generate(&noisy_spec(seed + t as u64)).unwrap();
        let problem = synth::make_problem(&scene, 8);
        let gt = scene.ground_truth();
        let config = base_config(seed + t as u64);
        let edges = estimate_edges(&problem, &config);
        for (v, (_, obj, post)) in variants.iter_mut().zip(&modes) {
            let cfg = SolverConfig { trans_objective: *obj, post_mode: *post, ..config.clone() };
            let report = solve_with_edges(&problem, &edges, &cfg).unwrap();
            v.record(&errors_of(&report, &gt));
        }
    }
    print_table(&variants, 0)
}

fn suite_noise(trials: usize, seed: u64) -> String {
    let rot_levels = [0.0, 1.0, 5.0, 10.0];
    let trans_levels = [0.0, 0.02, 0.1, 0.2];
    let mut out = String::new();
    let run = |scene: &SyntheticScene, level_scene: SyntheticScene, config: &SolverConfig| {
        let problem = synth::make_problem(&level_scene, 8);
        let edges = estimate_edges(&problem, config);
        let report = solve_with_edges(&problem, &edges, config).unwrap();
        errors_of(&report, &scene.ground_truth())
    };
    for (label, levels, is_rot) in [
        ("rotation noise (deg)", rot_levels, true),
        ("center noise (units)", trans_levels, false),
    ] {
        writeln!(out, "{label}").unwrap();
        writeln!(out, "{:>10} {:>14} {:>14}", "level", "median pos", "median rot deg").unwrap();
        for &level in &levels {
            let mut pos = Vec::new();
            let mut rot = Vec::new();
            for t in 0..trials {
                let spec = SceneSpec { pixel_noise_sigma: 0.5, ..noisy_spec(seed + t as u64) };
                let spec = SceneSpec { match_outlier_rate: 0.1, edge_outlier_rate: 0.05, ..spec };
                let scene = synth::generate(&spec).unwrap();
                let corrupted = if is_rot {
                    synth::corrupt_database(&scene, level, 0.0)
                } else {
                    synth::corrupt_database(&scene, 0.0, level)
                };
                let config = base_config(seed + t as u64);
                for (p, r) in run(&scene, corrupted, &config) {
                    pos.push(p);
                    rot.push(r);
                }
            }
            writeln!(
                out,
                "{:>10} {:>14.6} {:>14.6}",
                level,
                metrics::median(&pos).unwrap_or(f64::NAN),
                metrics::median(&rot).unwrap_or(f64::NAN)
            )
            .unwrap();
        }
    }
    out
}

fn suite_topk(trials: usize, seed: u64) -> String {
    let ks = [2usize, 5, 10, 20];
    let mut out = String::new();
    writeln!(out, "{:>6} {:>14} {:>14}", "top-k", "median pos", "median rot deg").unwrap();
    let mut per_k: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); ks.len()];
    for t in 0..trials {
        let spec = SceneSpec { n_database: 20, ..noisy_spec(seed + t as u64) };
        let scene = synth::generate(&spec).unwrap();
        let gt = scene.ground_truth();
        let config = base_config(seed + t as u64);
        let full = synth::make_problem(&scene, 20);
        let edges = estimate_edges(&full, &config);
        for (i, &k) in ks.iter().enumerate() {
            let problem = synth::make_problem(&scene, k);
            let wanted: std::collections::BTreeSet<(ImageId, ImageId)> =
                problem.retrieval_pairs.iter().map(|&(q, d)| (d, q)).collect();
            let subset = maloc_core::pipeline::EstimatedEdges {
                edges: edges.edges.iter().filter(|e| wanted.contains(&e.edge)).cloned().collect(),
                dropped: Vec::new(),
            };
            let report = solve_with_edges(&problem, &subset, &config).unwrap();
            for (p, r) in errors_of(&report, &gt) {
                per_k[i].0.push(p);
                per_k[i].1.push(r);
            }
        }
    }
    for (i, &k) in ks.iter().enumerate() {
        writeln!(
            out,
            "{:>6} {:>14.6} {:>14.6}",
            k,
            metrics::median(&per_k[i].0).unwrap_or(f64::NAN),
            metrics::median(&per_k[i].1).unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    out
}

fn mq_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        n_database: 10,
        n_queries: 15,
        n_points: 200,
        pixel_noise_sigma: 1.5,
        match_outlier_rate: 0.2,
        edge_outlier_rate: 0.15,
        seed,
        ..Default::default()
    }
}

fn suite_multiquery(trials: usize, seed: u64) -> String {
    let mut single = Variant::new("single");
    let mut l3 = Variant::new("colocalize L=3");
    let mut l5 = Variant::new("colocalize L=5");
    for t in 0..trials {
        let scene = synth::generate(&mq_spec(seed + t as u64)).unwrap();
        let gt = scene.ground_truth();
        let config = SolverConfig { seed: seed + t as u64, ..base_config(seed + t as u64) };
        let problem = synth::make_problem(&scene, 3);
        let report = localize(&problem, &config).unwrap();
        single.record(&errors_of(&report, &gt));
        for (len, v) in [(3usize, &mut l3), (5usize, &mut l5)] {
            let mut errs = Vec::new();
            for p in synth::make_multiquery_problems(&scene, 3, len) {
                let cfg = SolverConfig { mode: SolveMode::Colocalize, ..config.clone() };
                let report = localize(&p, &cfg).unwrap();
                errs.extend(errors_of(&report, &gt));
            }
            v.record(&errs);
        }
    }
    print_table(&[single, l3, l5], 2)
}

fn suite_rig(trials: usize, seed: u64) -> String {
    let mut variants = vec![
        Variant::new("colocalize L=3"),
        Variant::new("rig L=3"),
        Variant::new("colocalize L=5"),
        Variant::new("rig L=5"),
    ];
    for t in 0..trials {
        let scene = synth::generate(&mq_spec(seed + t as u64)).unwrap();
        let gt = scene.ground_truth();
        let config = base_config(seed + t as u64);
        for (i, len) in [(0usize, 3usize), (2, 5)] {
            let mut mq_errs = Vec::new();
            for p in synth::make_multiquery_problems(&scene, 3, len) {
                let cfg = SolverConfig { mode: SolveMode::Colocalize, ..config.clone() };
                mq_errs.extend(errors_of(&localize(&p, &cfg).unwrap(), &gt));
            }
            variants[i].record(&mq_errs);
            let mut rig_errs = Vec::new();
            for p in synth::make_rig_problems(&scene, 3, len) {
                let cfg = SolverConfig { mode: SolveMode::Rig, ..config.clone() };
                rig_errs.extend(errors_of(&localize(&p, &cfg).unwrap(), &gt));
            }
            variants[i + 1].record(&rig_errs);
        }
    }
    print_table(&variants, 1)
}
