//! Flat key-value run configuration: the same lexical rules as the bundle
//! formats (UTF-8, whitespace separated, `#` comments), every key mapping
//! to exactly one solver option. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use maloc_core::pipeline::{PostMode, SolveMode, SolverConfig};
use maloc_core::transavg::TranslationObjective;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Every run-config key with its default; drives parsing and `--help`.
pub const CONFIG_KEYS: &[KeySpec] = &[
    KeySpec { key: "mode", default: "independent", help: "independent | colocalize | rig" },
    KeySpec { key: "post_mode", default: "full", help: "full | none | sampson | local-opt" },
    KeySpec { key: "trans_objective", default: "angular", help: "angular | lud" },
    KeySpec { key: "threshold_px", default: "4", help: "two-view inlier threshold, pixels" },
    KeySpec { key: "min_inliers", default: "15", help: "minimum inliers for a valid edge" },
    KeySpec { key: "ransac_max_iterations", default: "10000", help: "RANSAC iteration cap" },
    KeySpec { key: "ransac_confidence", default: "0.9999", help: "RANSAC stopping confidence" },
    KeySpec { key: "l1_iters", default: "5", help: "rotation averaging L1 iterations" },
    KeySpec { key: "irls_iters", default: "10", help: "rotation averaging IRLS iterations" },
    KeySpec { key: "irls_sigma", default: "0.1", help: "IRLS starting scale, radians" },
    KeySpec { key: "irls_sigma_floor", default: "0.0001", help: "annealed IRLS scale floor" },
    KeySpec { key: "rot_tol", default: "1e-8", help: "rotation update stop tolerance, radians" },
    KeySpec { key: "inlier_cap", default: "150", help: "inlier-count weight cap" },
    KeySpec { key: "gate_deg", default: "5", help: "rotation-consistency gate, degrees" },
    KeySpec { key: "huber_delta_deg", default: "5", help: "translation Huber start, degrees" },
    KeySpec { key: "huber_floor_deg", default: "0.001", help: "translation Huber floor, degrees" },
    KeySpec { key: "trans_max_iters", default: "100", help: "translation averaging iterations" },
    KeySpec { key: "trans_tol", default: "1e-10", help: "translation stop tolerance" },
    KeySpec { key: "trans_robust", default: "true", help: "robustify translation averaging" },
    KeySpec { key: "refine_translations", default: "true", help: "re-optimize edge directions" },
    KeySpec { key: "min_tri_angle_deg", default: "1", help: "track triangulation angle, degrees" },
    KeySpec { key: "max_reproj_px", default: "4", help: "track reprojection gate, pixels" },
    KeySpec { key: "joint_huber_px", default: "4", help: "joint refinement Huber scale, pixels" },
    KeySpec { key: "joint_max_iters", default: "100", help: "joint refinement iterations" },
    KeySpec { key: "single_db_obs_weight", default: "0.5", help: "weight of 1-database-view tracks" },
    KeySpec { key: "seed", default: "0", help: "global RNG seed" },
    KeySpec { key: "threads", default: "0", help: "worker threads (0 = machine parallelism)" },
];

pub fn help_text() -> String {
    let mut out = String::from("Config file keys (flat `key value` lines, `#` comments):\n");
    for k in CONFIG_KEYS {
        out.push_str(&format!("  {:<22} default {:<10} {}\n", k.key, k.default, k.help));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), threads: 0 }
    }
}

pub fn parse_config_text(text: &str, origin: &str) -> Result<RunConfig, String> {
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap().to_string();
        let value: Vec<&str> = it.collect();
        if value.is_empty() {
            return Err(format!("{origin}:{}: key `{key}` has no value", idx + 1));
        }
        if !CONFIG_KEYS.iter().any(|k| k.key == key) {
            return Err(format!("{origin}:{}: unknown key `{key}`", idx + 1));
        }
        values.insert(key, value.join(" "));
    }
    build_config(&values)
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {path:?}: {e}"))?;
    parse_config_text(&text, &path.display().to_string())
}

fn build_config(values: &BTreeMap<String, String>) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    let get = |key: &str| values.get(key).map(String::as_str);
    let parse_f64 = |key: &str, dst: &mut f64| -> Result<(), String> {
        if let Some(v) = get(key) {
            *dst = v.parse().map_err(|_| format!("key `{key}`: invalid number `{v}`"))?;
        }
        Ok(())
    };
    let parse_usize = |key: &str, dst: &mut usize| -> Result<(), String> {
        if let Some(v) = get(key) {
            *dst = v.parse().map_err(|_| format!("key `{key}`: invalid integer `{v}`"))?;
        }
        Ok(())
    };
    let parse_bool = |key: &str, dst: &mut bool| -> Result<(), String> {
        if let Some(v) = get(key) {
            *dst = match v {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                _ => return Err(format!("key `{key}`: invalid boolean `{v}`")),
            };
        }
        Ok(())
    };

    if let Some(v) = get("mode") {
        cfg.solver.mode = parse_mode(v)?;
    }
    if let Some(v) = get("post_mode") {
        cfg.solver.post_mode = parse_post_mode(v)?;
    }
    if let Some(v) = get("trans_objective") {
        cfg.solver.trans_objective = match v {
            "angular" => TranslationObjective::Angular,
            "lud" => TranslationObjective::Lud,
            _ => return Err(format!("key `trans_objective`: unknown value `{v}`")),
        };
    }
    parse_f64("threshold_px", &mut cfg.solver.threshold_px)?;
    parse_usize("min_inliers", &mut cfg.solver.min_inliers)?;
    parse_usize("ransac_max_iterations", &mut cfg.solver.ransac_max_iterations)?;
    parse_f64("ransac_confidence", &mut cfg.solver.ransac_confidence)?;
    parse_usize("l1_iters", &mut cfg.solver.rotation.l1_iters)?;
    parse_usize("irls_iters", &mut cfg.solver.rotation.irls_iters)?;
    parse_f64("irls_sigma", &mut cfg.solver.rotation.irls_sigma)?;
    parse_f64("irls_sigma_floor", &mut cfg.solver.rotation.sigma_floor)?;
    parse_f64("rot_tol", &mut cfg.solver.rotation.tol)?;
    let mut cap = cfg.solver.inlier_cap;
    parse_usize("inlier_cap", &mut cap)?;
    cfg.solver.inlier_cap = cap;
    cfg.solver.rotation.inlier_cap = cap;
    parse_f64("gate_deg", &mut cfg.solver.gate_deg)?;
    parse_f64("huber_delta_deg", &mut cfg.solver.translation.huber_delta_deg)?;
    parse_f64("huber_floor_deg", &mut cfg.solver.translation.huber_floor_deg)?;
    parse_usize("trans_max_iters", &mut cfg.solver.translation.max_iters)?;
    parse_f64("trans_tol", &mut cfg.solver.translation.tol)?;
    parse_bool("trans_robust", &mut cfg.solver.translation.robust)?;
    parse_bool("refine_translations", &mut cfg.solver.refine_translations)?;
    parse_f64("min_tri_angle_deg", &mut cfg.solver.joint.triangulation.min_tri_angle_deg)?;
    parse_f64("max_reproj_px", &mut cfg.solver.joint.triangulation.max_reproj_px)?;
    parse_f64("joint_huber_px", &mut cfg.solver.joint.huber_px)?;
    parse_usize("joint_max_iters", &mut cfg.solver.joint.max_iters)?;
    parse_f64("single_db_obs_weight", &mut cfg.solver.joint.single_db_obs_weight)?;
    let mut seed = cfg.solver.seed;
    if let Some(v) = get("seed") {
        seed = v.parse().map_err(|_| format!("key `seed`: invalid integer `{v}`"))?;
    }
    cfg.solver.seed = seed;
    parse_usize("threads", &mut cfg.threads)?;
    Ok(cfg)
}

pub fn parse_mode(v: &str) -> Result<SolveMode, String> {
    match v {
        "independent" => Ok(SolveMode::Independent),
        "colocalize" => Ok(SolveMode::Colocalize),
        "rig" => Ok(SolveMode::Rig),
        _ => Err(format!("unknown mode `{v}`")),
    }
}

pub fn parse_post_mode(v: &str) -> Result<PostMode, String> {
    match v {
        "full" => Ok(PostMode::Full),
        "none" => Ok(PostMode::None),
        "sampson" => Ok(PostMode::Sampson),
        "local-opt" => Ok(PostMode::LocalOpt),
        _ => Err(format!("unknown post_mode `{v}`")),
    }
}
