//! Scene spec files for the `synth` subcommand: flat key-value text with
//! the same lexical rules as the run config.

use std::collections::BTreeMap;
use std::path::Path;

use maloc_core::geom::CameraIntrinsics;
use maloc_core::synth::{CameraLayout, SceneSpec};
use nalgebra::Vector3;

pub struct SpecKey {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const SPEC_KEYS: &[SpecKey] = &[
    SpecKey { key: "n_database", default: "10", help: "database camera count" },
    SpecKey { key: "n_queries", default: "20", help: "query camera count" },
    SpecKey { key: "n_points", default: "500", help: "3D point count" },
    SpecKey { key: "layout", default: "sphere", help: "sphere | line | grid" },
    SpecKey { key: "radius", default: "4", help: "sphere layout radius" },
    SpecKey { key: "line_direction", default: "1 0 0", help: "line layout direction" },
    SpecKey { key: "spacing", default: "0.8", help: "line layout camera spacing" },
    SpecKey { key: "standoff", default: "4", help: "line/grid layout standoff" },
    SpecKey { key: "extent", default: "3", help: "grid layout half extent" },
    SpecKey { key: "box_min", default: "-0.5 -0.5 -0.5", help: "point region minimum corner" },
    SpecKey { key: "box_max", default: "0.5 0.5 0.5", help: "point region maximum corner" },
    SpecKey { key: "fx", default: "500", help: "focal length x, pixels" },
    SpecKey { key: "fy", default: "500", help: "focal length y, pixels" },
    SpecKey { key: "cx", default: "320", help: "principal point x, pixels" },
    SpecKey { key: "cy", default: "240", help: "principal point y, pixels" },
    SpecKey { key: "pixel_noise_sigma", default: "0", help: "keypoint noise, pixels" },
    SpecKey { key: "match_outlier_rate", default: "0", help: "per-match outlier fraction" },
    SpecKey { key: "edge_outlier_rate", default: "0", help: "per-pair outlier fraction" },
    SpecKey { key: "seed", default: "0", help: "scene RNG seed" },
    SpecKey { key: "top_k", default: "10", help: "retrieval depth for emitted pairs" },
];

pub fn help_text() -> String {
    let mut out = String::from("Scene spec keys (flat `key value` lines, `#` comments):\n");
    for k in SPEC_KEYS {
        out.push_str(&format!("  {:<20} default {:<14} {}\n", k.key, k.default, k.help));
    }
    out
}

pub fn load_spec(path: &Path) -> Result<(SceneSpec, usize), String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {path:?}: {e}"))?;
    parse_spec_text(&text, &path.display().to_string())
}

pub fn parse_spec_text(text: &str, origin: &str) -> Result<(SceneSpec, usize), String> {
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
        if !SPEC_KEYS.iter().any(|k| k.key == key) {
            return Err(format!("{origin}:{}: unknown key `{key}`", idx + 1));
        }
        values.insert(key, value.join(" "));
    }

    let get = |key: &str| -> &str {
        values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| SPEC_KEYS.iter().find(|k| k.key == key).unwrap().default)
    };
    let f64_of = |key: &str| -> Result<f64, String> {
        get(key).parse().map_err(|_| format!("key `{key}`: invalid number `{}`", get(key)))
    };
    let usize_of = |key: &str| -> Result<usize, String> {
        get(key).parse().map_err(|_| format!("key `{key}`: invalid integer `{}`", get(key)))
    };
    let vec3_of = |key: &str| -> Result<Vector3<f64>, String> {
        let parts: Vec<&str> = get(key).split_whitespace().collect();
        if parts.len() != 3 {
            return Err(format!("key `{key}`: expected 3 numbers"));
        }
        let mut v = [0.0; 3];
        for (i, p) in parts.iter().enumerate() {
            v[i] = p.parse().map_err(|_| format!("key `{key}`: invalid number `{p}`"))?;
        }
        Ok(Vector3::new(v[0], v[1], v[2]))
    };

    let layout = match get("layout") {
        "sphere" => CameraLayout::Sphere { radius: f64_of("radius")? },
        "line" => CameraLayout::Line {
            direction: vec3_of("line_direction")?,
            spacing: f64_of("spacing")?,
            standoff: f64_of("standoff")?,
        },
        "grid" => {
            CameraLayout::Grid { extent: f64_of("extent")?, standoff: f64_of("standoff")? }
        }
        other => return Err(format!("key `layout`: unknown value `{other}`")),
    };
    let spec = SceneSpec {
        n_database: usize_of("n_database")?,
        n_queries: usize_of("n_queries")?,
        n_points: usize_of("n_points")?,
        camera_layout: layout,
        point_region: (vec3_of("box_min")?, vec3_of("box_max")?),
        intrinsics: CameraIntrinsics::new(
            f64_of("fx")?,
            f64_of("fy")?,
            f64_of("cx")?,
            f64_of("cy")?,
        ),
        pixel_noise_sigma: f64_of("pixel_noise_sigma")?,
        match_outlier_rate: f64_of("match_outlier_rate")?,
        edge_outlier_rate: f64_of("edge_outlier_rate")?,
        seed: usize_of("seed")? as u64,
    };
    let top_k = usize_of("top_k")?.min(spec.n_database);
    Ok((spec, top_k))
}
