//! Pose error metrics and evaluation summaries shared by the report writer
//! and the CLI evaluator.

use crate::geom::{Pose, Rotation3};

/// Geodesic rotation error in degrees.
pub fn rotation_error_deg(a: &Rotation3, b: &Rotation3) -> f64 {
    a.angle_to(b).to_degrees()
}

/// Camera-center distance in scene units.
pub fn position_error(a: &Pose, b: &Pose) -> f64 {
    (a.camera_center() - b.camera_center()).norm()
}

/// Sort-based median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

/// Recall thresholds in (scene units, degrees), in the usual
/// fine/medium/coarse reporting style.
pub const RECALL_THRESHOLDS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub n_failed: usize,
    pub median_position: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    /// Fraction of queries within each `RECALL_THRESHOLDS` bucket; failed
    /// queries count against recall.
    pub recalls: [f64; 3],
}

/// Summarizes per-query (position, rotation) errors; `None` marks a query
/// that produced no pose.
pub fn summarize(errors: &[Option<(f64, f64)>]) -> EvalSummary {
    let solved: Vec<(f64, f64)> = errors.iter().flatten().copied().collect();
    let n = errors.len();
    let positions: Vec<f64> = solved.iter().map(|e| e.0).collect();
    let rotations: Vec<f64> = solved.iter().map(|e| e.1).collect();
    let mut recalls = [0.0; 3];
    if n > 0 {
        for (i, (tp, tr)) in RECALL_THRESHOLDS.iter().enumerate() {
            let hit = solved.iter().filter(|(p, r)| p <= tp && r <= tr).count();
            recalls[i] = hit as f64 / n as f64;
        }
    }
    EvalSummary {
        n,
        n_failed: n - solved.len(),
        median_position: median(&positions),
        median_rotation_deg: median(&rotations),
        recalls,
    }
}
