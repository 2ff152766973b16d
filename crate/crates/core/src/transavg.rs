//! Anchored translation averaging: given solved rotations, refine per-edge
//! translation directions, gate edges by rotation consistency, and minimize
//! a nonlinear angular objective over query camera centers with database
//! centers held fixed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::geom::Rotation3;
use crate::twoview::{Correspondence, RelativePoseMeasurement};
use crate::ImageId;

#[derive(Debug, Error, PartialEq)]
pub enum TransAvgError {
    #[error("relative translation refinement needs at least 2 inliers, got {got}")]
    InsufficientInliers { got: usize },
    #[error("every edge failed the rotation-consistency gate")]
    AllEdgesRejected,
    #[error("ray system is rank-deficient (parallel rays)")]
    DegenerateGeometry,
    #[error("query {0} has fewer than 2 usable edges; its scale is unobservable")]
    ScaleUnobservable(ImageId),
}

/// World-frame translation direction of a measurement, pointing from the
/// first endpoint's camera center toward the second's. Needs the solved
/// absolute rotation of endpoint B: `lambda d = C_b - C_a, d = -R_b^T t_ab`.
pub fn world_direction(m: &RelativePoseMeasurement, rotation_b: &Rotation3) -> Vector3<f64> {
    let d = -rotation_b.inverse().rotate(&m.direction);
    d / d.norm()
}

/// Refines the relative translation direction of one edge by minimizing the
/// summed squared epipolar residual with the rotation frozen, a 2-parameter
/// chart on the unit sphere, starting from the robust estimate.
pub fn refine_relative_translation(
    initial_direction: &Vector3<f64>,
    rotation_ab: &Rotation3,
    inliers: &[Correspondence],
) -> Result<Vector3<f64>, TransAvgError> {
    if inliers.len() < 2 {
        return Err(TransAvgError::InsufficientInliers { got: inliers.len() });
    }
    let r = rotation_ab.matrix();
    // Residuals are linear in t: r_k = t . (R p x p').
    let coeffs: Vec<Vector3<f64>> = inliers
        .iter()
        .map(|c| {
            let rp = r * Vector3::new(c.p[0], c.p[1], 1.0);
            rp.cross(&Vector3::new(c.p_prime[0], c.p_prime[1], 1.0))
        })
        .collect();
    let cost = |t: &Vector3<f64>| -> f64 { coeffs.iter().map(|c| c.dot(t).powi(2)).sum() };

    let mut t = initial_direction.normalize();
    let mut lambda = 1e-10;
    let mut current = cost(&t);
    for _ in 0..30 {
        let (b1, b2) = crate::twoview::tangent_basis(&t);
        let mut h = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for c in &coeffs {
            let j = [c.dot(&b1), c.dot(&b2)];
            let r = c.dot(&t);
            h[0][0] += j[0] * j[0];
            h[0][1] += j[0] * j[1];
            h[1][1] += j[1] * j[1];
            g[0] += j[0] * r;
            g[1] += j[1] * r;
        }
        h[1][0] = h[0][1];
        let mut stepped = false;
        for _ in 0..10 {
            let d = [h[0][0] + lambda, h[1][1] + lambda];
            let det = d[0] * d[1] - h[0][1] * h[1][0];
            if det.abs() < 1e-300 {
                lambda = (lambda * 10.0).max(1e-12);
                continue;
            }
            let s0 = (-g[0] * d[1] + g[1] * h[0][1]) / det;
            let s1 = (-g[1] * d[0] + g[0] * h[1][0]) / det;
            let trial = (t + b1 * s0 + b2 * s1).normalize();
            let trial_cost = cost(&trial);
            if trial_cost <= current {
                let step = (s0 * s0 + s1 * s1).sqrt();
                t = trial;
                current = trial_cost;
                lambda = (lambda * 0.3).max(1e-14);
                stepped = true;
                if step < 1e-14 {
                    return Ok(t);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            break;
        }
    }
    Ok(t)
}

/// Keeps the edges whose measured relative rotation agrees with the solved
/// absolute rotations within `threshold_rad` (strict). Returns indices.
pub fn gate_edges(
    edges: &[RelativePoseMeasurement],
    rotations: &BTreeMap<ImageId, Rotation3>,
    threshold_rad: f64,
) -> Result<Vec<usize>, TransAvgError> {
    let mut kept = Vec::new();
    for (i, e) in edges.iter().enumerate() {
        let (Some(ra), Some(rb)) = (rotations.get(&e.edge.0), rotations.get(&e.edge.1)) else {
            continue;
        };
        let predicted = *rb * ra.inverse();
        if e.rotation.angle_to(&predicted) < threshold_rad {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(TransAvgError::AllEdgesRejected);
    }
    Ok(kept)
}

/// A ray toward an unknown center: origin plus unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

/// Closed-form point minimizing the summed squared perpendicular distance
/// to the rays (3x3 normal equations).
pub fn initialize_center(rays: &[Ray]) -> Result<Vector3<f64>, TransAvgError> {
    assert!(rays.len() >= 2, "center initialization needs at least 2 rays");
    let (m, b) = ray_normal_equations(rays);
    let eig = nalgebra::SymmetricEigen::new(m);
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lam_min <= 1e-10 * lam_max {
        return Err(TransAvgError::DegenerateGeometry);
    }
    Ok(m.lu().solve(&b).ok_or(TransAvgError::DegenerateGeometry)?)
}

/// Minimum-norm solution of the ray system with small eigenvalues zeroed;
/// the fallback starting point when the rays are (near) parallel.
pub fn initialize_center_min_norm(rays: &[Ray]) -> Vector3<f64> {
    let (m, b) = ray_normal_equations(rays);
    let eig = nalgebra::SymmetricEigen::new(m);
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut x = Vector3::zeros();
    for k in 0..3 {
        let lam = eig.eigenvalues[k];
        if lam > 1e-10 * lam_max {
            let v: Vector3<f64> = eig.eigenvectors.column(k).into();
            x += v * (v.dot(&b) / lam);
        }
    }
    // Anchor the free component at the mean ray origin's projection.
    let mean_origin: Vector3<f64> =
        rays.iter().map(|r| r.origin).sum::<Vector3<f64>>() / rays.len() as f64;
    for k in 0..3 {
        let lam = eig.eigenvalues[k];
        if lam <= 1e-10 * lam_max {
            let v: Vector3<f64> = eig.eigenvectors.column(k).into();
            x += v * v.dot(&mean_origin);
        }
    }
    x
}

fn ray_normal_equations(rays: &[Ray]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for r in rays {
        let p = Matrix3::identity() - r.direction * r.direction.transpose();
        m += p;
        b += p * r.origin;
    }
    (m, b)
}

/// One translation-averaging constraint.
#[derive(Debug, Clone)]
pub struct TransEdge {
    /// Fixed ray origin (database center, possibly rig-shifted), or the id
    /// of the unknown the ray starts from.
    pub source: EdgeSource,
    /// Unknown the direction points at.
    pub target: ImageId,
    /// Unit world-frame direction from source toward target.
    pub direction: Vector3<f64>,
    /// Inlier-count weight, already normalized.
    pub weight: f64,
    /// Backing image pair, for reports.
    pub pair: (ImageId, ImageId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeSource {
    Fixed(Vector3<f64>),
    Unknown(ImageId),
}

/// Observability of one unknown: edge count and the widest angle spanned
/// by its incident directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterObservability {
    pub edge_count: usize,
    pub span_angle: f64,
}

#[derive(Debug, Clone)]
pub struct TranslationProblem {
    fixed_centers: BTreeMap<ImageId, Vector3<f64>>,
    unknowns: Vec<ImageId>,
    edges: Vec<TransEdge>,
}

impl TranslationProblem {
    pub fn new(
        fixed_centers: BTreeMap<ImageId, Vector3<f64>>,
        mut unknowns: Vec<ImageId>,
        edges: Vec<TransEdge>,
    ) -> Self {
        unknowns.sort_unstable();
        unknowns.dedup();
        for e in &edges {
            debug_assert!((e.direction.norm() - 1.0).abs() < 1e-12, "direction must be unit");
        }
        Self { fixed_centers, unknowns, edges }
    }

    pub fn fixed_centers(&self) -> &BTreeMap<ImageId, Vector3<f64>> {
        &self.fixed_centers
    }

    pub fn unknown_ids(&self) -> &[ImageId] {
        &self.unknowns
    }

    pub fn edges(&self) -> &[TransEdge] {
        &self.edges
    }

    /// Per-unknown edge counts and direction spans; queries with fewer than
    /// two edges (or a vanishing span) cannot be located metrically from
    /// directions alone.
    pub fn observability(&self) -> BTreeMap<ImageId, CenterObservability> {
        let mut out = BTreeMap::new();
        for &u in &self.unknowns {
            let dirs: Vec<Vector3<f64>> = self
                .edges
                .iter()
                .filter(|e| e.target == u || e.source == EdgeSource::Unknown(u))
                .map(|e| e.direction)
                .collect();
            let mut span: f64 = 0.0;
            for i in 0..dirs.len() {
                for j in (i + 1)..dirs.len() {
                    let a = dirs[i].cross(&dirs[j]).norm().atan2(dirs[i].dot(&dirs[j]));
                    span = span.max(a.min(std::f64::consts::PI - a));
                }
            }
            out.insert(u, CenterObservability { edge_count: dirs.len(), span_angle: span });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationObjective {
    /// Chordal surrogate of the direction angle error (the default).
    Angular,
    /// Least unsquared deviations on point-line distances (ablation mode).
    Lud,
}

#[derive(Debug, Clone)]
pub struct TranslationOptions {
    /// Starting Huber scale; the chordal length of this angle.
    pub huber_delta_deg: f64,
    /// The scale is halved after every accepted step down to this floor, so
    /// gross outlier directions lose their residual pull on the optimum.
    pub huber_floor_deg: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Disable to reproduce the plain (non-robustified) weighted objective.
    pub robust: bool,
    pub objective: TranslationObjective,
}

impl Default for TranslationOptions {
    fn default() -> Self {
        Self {
            huber_delta_deg: 5.0,
            huber_floor_deg: 0.001,
            max_iters: 100,
            tol: 1e-10,
            robust: true,
            objective: TranslationObjective::Angular,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CenterSolution {
    pub centers: BTreeMap<ImageId, Vector3<f64>>,
    pub converged: bool,
    pub objective: f64,
}

/// Solves for the unknown camera centers from the gated, refined directions.
pub fn solve_centers(
    problem: &TranslationProblem,
    init: &BTreeMap<ImageId, Vector3<f64>>,
    opts: &TranslationOptions,
) -> Result<CenterSolution, TransAvgError> {
    let obs = problem.observability();
    for (&u, o) in &obs {
        if o.edge_count < 2 {
            return Err(TransAvgError::ScaleUnobservable(u));
        }
    }
    match opts.objective {
        TranslationObjective::Angular => solve_centers_angular(problem, init, opts),
        TranslationObjective::Lud => solve_centers_lud(problem, init, opts),
    }
}

fn solve_centers_angular(
    problem: &TranslationProblem,
    init: &BTreeMap<ImageId, Vector3<f64>>,
    opts: &TranslationOptions,
) -> Result<CenterSolution, TransAvgError> {
    let unknowns = &problem.unknowns;
    let col_of: BTreeMap<ImageId, usize> =
        unknowns.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = unknowns.len();
    let huber_floor = 2.0 * (opts.huber_floor_deg.to_radians() / 2.0).sin();
    let mut huber_delta = (2.0 * (opts.huber_delta_deg.to_radians() / 2.0).sin()).max(huber_floor);

    let mut centers = init.clone();
    let objective = |centers: &BTreeMap<ImageId, Vector3<f64>>, delta: f64| -> f64 {
        problem
            .edges
            .iter()
            .map(|e| {
                let (from, to) = edge_endpoints(centers, e);
                let sep = to - from;
                let norm = sep.norm();
                if norm < 1e-300 {
                    return e.weight * huber(2.0, delta, opts.robust);
                }
                let r = (e.direction - sep / norm).norm();
                e.weight * huber(r, delta, opts.robust)
            })
            .sum()
    };

    let mut current = objective(&centers, huber_delta);
    let mut lambda = 1e-6;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut g = DVector::<f64>::zeros(3 * n);
        for e in &problem.edges {
            let (from, to) = edge_endpoints(&centers, e);
            let sep = to - from;
            let norm = sep.norm();
            if norm < 1e-300 {
                continue;
            }
            let u = sep / norm;
            let r = e.direction - u;
            // IRLS form of the Huber loss: scale residual and Jacobian rows.
            let w = e.weight * huber_weight(r.norm(), huber_delta, opts.robust);
            let j_to = -(Matrix3::identity() - u * u.transpose()) / norm;
            let mut add_block = |col: usize, jac: &Matrix3<f64>| {
                let base = 3 * col;
                for a in 0..3 {
                    for b in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += jac[(k, a)] * jac[(k, b)];
                        }
                        h[(base + a, base + b)] += w * acc;
                    }
                    let mut gr = 0.0;
                    for k in 0..3 {
                        gr += jac[(k, a)] * r[k];
                    }
                    g[base + a] += w * gr;
                }
            };
            let col_to = col_of[&e.target];
            add_block(col_to, &j_to);
            if let EdgeSource::Unknown(from_id) = e.source {
                let col_from = col_of[&from_id];
                let j_from = -j_to;
                add_block(col_from, &j_from);
                // Cross terms between the two unknowns.
                let (b_to, b_from) = (3 * col_to, 3 * col_from);
                for a in 0..3 {
                    for b in 0..3 {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += j_to[(k, a)] * j_from[(k, b)];
                        }
                        h[(b_to + a, b_from + b)] += w * acc;
                        h[(b_from + b, b_to + a)] += w * acc;
                    }
                }
            }
        }

        let mut stepped = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for i in 0..3 * n {
                damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
            }
            let Some(step) = damped.clone().lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = centers.clone();
            for (&id, &col) in &col_of {
                let d = Vector3::new(step[3 * col], step[3 * col + 1], step[3 * col + 2]);
                *trial.get_mut(&id).unwrap() += d;
            }
            let trial_obj = objective(&trial, huber_delta);
            if trial_obj <= current {
                centers = trial;
                let drop = current - trial_obj;
                current = trial_obj;
                lambda = (lambda * 0.3).max(1e-12);
                stepped = true;
                let at_floor = !opts.robust || huber_delta <= huber_floor * 1.0000001;
                if at_floor && (step.norm() < opts.tol || drop < opts.tol * current.max(1e-300)) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !stepped {
            converged = converged || !stepped;
            break;
        }
        if opts.robust && huber_delta > huber_floor {
            huber_delta = (huber_delta * 0.5).max(huber_floor);
            current = objective(&centers, huber_delta);
        }
    }
    Ok(CenterSolution { centers, converged, objective: current })
}

/// Least-unsquared-deviations mode: IRLS over point-line distances. The
/// projection residual vanishes when two centers collapse, which is exactly
/// the bias this ablation mode exists to demonstrate.
fn solve_centers_lud(
    problem: &TranslationProblem,
    init: &BTreeMap<ImageId, Vector3<f64>>,
    opts: &TranslationOptions,
) -> Result<CenterSolution, TransAvgError> {
    let unknowns = &problem.unknowns;
    let col_of: BTreeMap<ImageId, usize> =
        unknowns.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = unknowns.len();
    let mut centers = init.clone();

    let point_line = |centers: &BTreeMap<ImageId, Vector3<f64>>, e: &TransEdge| -> f64 {
        let (from, to) = edge_endpoints(centers, e);
        let sep = to - from;
        (sep - e.direction * e.direction.dot(&sep)).norm()
    };

    let mut objective =
        problem.edges.iter().map(|e| e.weight * point_line(&centers, e)).sum::<f64>();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut g = DVector::<f64>::zeros(3 * n);
        for e in &problem.edges {
            let w = e.weight / point_line(&centers, e).max(1e-12);
            let p = Matrix3::identity() - e.direction * e.direction.transpose();
            let (from, to) = edge_endpoints(&centers, e);
            let r = p * (to - from);
            let col_to = col_of[&e.target];
            for a in 0..3 {
                for b in 0..3 {
                    h[(3 * col_to + a, 3 * col_to + b)] += w * p[(a, b)];
                }
                g[3 * col_to + a] += w * r[a];
            }
            if let EdgeSource::Unknown(from_id) = e.source {
                let col_from = col_of[&from_id];
                for a in 0..3 {
                    for b in 0..3 {
                        h[(3 * col_from + a, 3 * col_from + b)] += w * p[(a, b)];
                        h[(3 * col_to + a, 3 * col_from + b)] -= w * p[(a, b)];
                        h[(3 * col_from + a, 3 * col_to + b)] -= w * p[(a, b)];
                    }
                    g[3 * col_from + a] -= w * r[a];
                }
            }
        }
        for i in 0..3 * n {
            h[(i, i)] += 1e-12;
        }
        let Some(step) = h.lu().solve(&(-&g)) else { break };
        for (&id, &col) in &col_of {
            let d = Vector3::new(step[3 * col], step[3 * col + 1], step[3 * col + 2]);
            *centers.get_mut(&id).unwrap() += d;
        }
        objective = problem.edges.iter().map(|e| e.weight * point_line(&centers, e)).sum();
        if step.norm() < opts.tol.max(1e-12) {
            converged = true;
            break;
        }
    }
    Ok(CenterSolution { centers, converged, objective })
}

fn edge_endpoints(
    centers: &BTreeMap<ImageId, Vector3<f64>>,
    e: &TransEdge,
) -> (Vector3<f64>, Vector3<f64>) {
    let from = match e.source {
        EdgeSource::Fixed(c) => c,
        EdgeSource::Unknown(id) => centers[&id],
    };
    (from, centers[&e.target])
}

fn huber(r: f64, delta: f64, robust: bool) -> f64 {
    if !robust || r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn huber_weight(r: f64, delta: f64, robust: bool) -> f64 {
    if !robust || r <= delta {
        1.0
    } else {
        delta / r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{relative_pose, Pose};
    use crate::twoview::EdgeKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            if v.norm() > 1e-3 && v.norm() <= 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3 {
        Rotation3::exp(&(random_unit(rng) * rng.random::<f64>() * 3.0))
    }

    fn project(pose: &Pose, x: &Vector3<f64>) -> [f64; 2] {
        let c = pose.transform(x);
        [c.x / c.z, c.y / c.z]
    }

    #[test]
    fn refine_translation_exact_and_perturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let p_a = Pose::new(random_rotation(&mut rng), Vector3::new(0.1, 0.0, 0.0));
        let p_b = Pose::new(random_rotation(&mut rng), Vector3::new(-0.2, 0.3, 0.15));
        let (r_ab, t_ab) = relative_pose(&p_a, &p_b);
        let t_true = t_ab / t_ab.norm();
        let inliers: Vec<Correspondence> = (0..40)
            .map(|i| {
                let x = p_a.camera_center()
                    + p_a.rotation.inverse().rotate(&Vector3::new(
                        0.4 * (i as f64 * 0.7).sin(),
                        0.3 * (i as f64 * 1.3).cos(),
                        3.0 + (i as f64 * 0.37).sin(),
                    ));
                Correspondence { p: project(&p_a, &x), p_prime: project(&p_b, &x), source_indices: (i, i) }
            })
            .collect();

        let refined = refine_relative_translation(&t_true, &r_ab, &inliers).unwrap();
        assert!(crate::geom::direction_angle(&refined, &t_true).unwrap() < 1e-9);

        // 2-degree perturbed start must come back.
        let (b1, _) = crate::twoview::tangent_basis(&t_true);
        let start = (t_true + b1 * (2.0_f64.to_radians().tan())).normalize();
        let refined = refine_relative_translation(&start, &r_ab, &inliers).unwrap();
        assert!(crate::geom::direction_angle(&refined, &t_true).unwrap() < 1e-8);

        assert_eq!(
            refine_relative_translation(&t_true, &r_ab, &inliers[..1]).unwrap_err(),
            TransAvgError::InsufficientInliers { got: 1 }
        );
    }

    fn measurement(a: ImageId, b: ImageId, rotation: Rotation3, kind: EdgeKind) -> RelativePoseMeasurement {
        RelativePoseMeasurement::new((a, b), rotation, Vector3::x(), vec![0, 1], kind)
    }

    #[test]
    fn gating_threshold_semantics() {
        let mut rotations = BTreeMap::new();
        rotations.insert(0, Rotation3::identity());
        rotations.insert(1, Rotation3::identity());
        let off = |deg: f64| {
            Rotation3::exp(&(Vector3::z() * (deg as f64).to_radians()))
        };
        let edges = vec![
            measurement(0, 1, off(0.1), EdgeKind::DatabaseQuery),
            measurement(0, 1, off(4.9), EdgeKind::DatabaseQuery),
            measurement(0, 1, off(5.1), EdgeKind::DatabaseQuery),
            measurement(0, 1, off(40.0), EdgeKind::DatabaseQuery),
        ];
        let kept = gate_edges(&edges, &rotations, 5.0_f64.to_radians()).unwrap();
        assert_eq!(kept, vec![0, 1]);

        let all_bad = vec![measurement(0, 1, off(10.0), EdgeKind::DatabaseQuery)];
        assert_eq!(
            gate_edges(&all_bad, &rotations, 5.0_f64.to_radians()).unwrap_err(),
            TransAvgError::AllEdgesRejected
        );
    }

    #[test]
    fn center_init_from_orthogonal_rays() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        let rays = vec![
            Ray { origin: x - Vector3::x() * 5.0, direction: Vector3::x() },
            Ray { origin: x - Vector3::y() * 3.0, direction: Vector3::y() },
        ];
        let c = initialize_center(&rays).unwrap();
        assert!((c - x).norm() < 1e-10);
    }

    #[test]
    fn center_init_parallel_rays_degenerate() {
        let rays = vec![
            Ray { origin: Vector3::zeros(), direction: Vector3::x() },
            Ray { origin: Vector3::new(0.0, 1.0, 0.0), direction: Vector3::x() },
        ];
        assert_eq!(initialize_center(&rays).unwrap_err(), TransAvgError::DegenerateGeometry);
        // The min-norm fallback lands on the span of the constrained
        // directions with the free component taken from the mean origin.
        let c = initialize_center_min_norm(&rays);
        assert!(c.x.abs() < 1e-12 && (c.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn center_init_five_exact_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = Vector3::new(-0.4, 0.8, 2.0);
        let rays: Vec<Ray> = (0..5)
            .map(|_| {
                let origin = 4.0 * random_unit(&mut rng);
                Ray { origin, direction: (x - origin).normalize() }
            })
            .collect();
        let c = initialize_center(&rays).unwrap();
        assert!((c - x).norm() < 1e-9);
    }

    fn anchored_problem(
        dirs_from: &[Vector3<f64>],
        target_center: Vector3<f64>,
        weights: &[f64],
    ) -> (TranslationProblem, BTreeMap<ImageId, Vector3<f64>>) {
        let query: ImageId = 100;
        let mut fixed = BTreeMap::new();
        let mut edges = Vec::new();
        for (i, origin) in dirs_from.iter().enumerate() {
            fixed.insert(i as ImageId, *origin);
            edges.push(TransEdge {
                source: EdgeSource::Fixed(*origin),
                target: query,
                direction: (target_center - origin).normalize(),
                weight: weights[i % weights.len()],
                pair: (i as ImageId, query),
            });
        }
        let problem = TranslationProblem::new(fixed, vec![query], edges);
        let mut init = BTreeMap::new();
        init.insert(query, target_center + Vector3::new(0.3, -0.2, 0.25));
        (problem, init)
    }

    #[test]
    fn solve_centers_exact_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let target = Vector3::new(0.3, -0.5, 1.2);
        let origins: Vec<Vector3<f64>> = (0..5).map(|_| 4.0 * random_unit(&mut rng)).collect();
        let (problem, init) = anchored_problem(&origins, target, &[1.0]);
        let sol = solve_centers(&problem, &init, &TranslationOptions::default()).unwrap();
        assert!((sol.centers[&100] - target).norm() < 1e-8, "err {}", (sol.centers[&100] - target).norm());
    }

    #[test]
    fn solve_centers_with_outlier_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let target = Vector3::new(0.3, -0.5, 1.2);
        let origins: Vec<Vector3<f64>> = (0..7).map(|_| 4.0 * random_unit(&mut rng)).collect();
        let (mut problem, init) = anchored_problem(&origins, target, &[1.0]);
        for i in [2usize, 5] {
            let perturb = Rotation3::exp(&(random_unit(&mut rng) * (0.6 + rng.random::<f64>())));
            problem.edges[i].direction = perturb.rotate(&problem.edges[i].direction);
        }
        let sol = solve_centers(&problem, &init, &TranslationOptions::default()).unwrap();
        assert!((sol.centers[&100] - target).norm() < 1e-4 * 4.0, "err {}", (sol.centers[&100] - target).norm());
    }

    #[test]
    fn solve_centers_single_edge_unobservable() {
        let target = Vector3::new(0.0, 0.0, 1.0);
        let (problem, init) = anchored_problem(&[Vector3::new(2.0, 0.0, 0.0)], target, &[1.0]);
        assert_eq!(
            solve_centers(&problem, &init, &TranslationOptions::default()).unwrap_err(),
            TransAvgError::ScaleUnobservable(100)
        );
    }

    #[test]
    fn anchors_and_equivariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let target = Vector3::new(0.2, 0.4, -0.7);
        let origins: Vec<Vector3<f64>> = (0..6).map(|_| 3.0 * random_unit(&mut rng)).collect();
        let (mut problem, init) = anchored_problem(&origins, target, &[0.5, 1.0]);
        // Slight direction noise so the optimum is not exactly the target.
        for e in &mut problem.edges {
            let perturb = Rotation3::exp(&(random_unit(&mut rng) * 0.01));
            e.direction = perturb.rotate(&e.direction);
        }
        let fixed_before = problem.fixed_centers().clone();
        let base = solve_centers(&problem, &init, &TranslationOptions::default()).unwrap();
        assert_eq!(&fixed_before, problem.fixed_centers());

        // Translation equivariance.
        let shift = Vector3::new(1.5, -2.0, 0.7);
        let mut shifted = problem.clone();
        for e in &mut shifted.edges {
            if let EdgeSource::Fixed(c) = &mut e.source {
                *c += shift;
            }
        }
        shifted.fixed_centers = shifted.fixed_centers.iter().map(|(&k, c)| (k, c + shift)).collect();
        let mut init_shifted = init.clone();
        for c in init_shifted.values_mut() {
            *c += shift;
        }
        let moved = solve_centers(&shifted, &init_shifted, &TranslationOptions::default()).unwrap();
        assert!((moved.centers[&100] - (base.centers[&100] + shift)).norm() < 1e-9);

        // Scale equivariance.
        let s = 2.75;
        let mut scaled = problem.clone();
        for e in &mut scaled.edges {
            if let EdgeSource::Fixed(c) = &mut e.source {
                *c *= s;
            }
        }
        scaled.fixed_centers = scaled.fixed_centers.iter().map(|(&k, c)| (k, c * s)).collect();
        let mut init_scaled = init.clone();
        for c in init_scaled.values_mut() {
            *c *= s;
        }
        let rescaled = solve_centers(&scaled, &init_scaled, &TranslationOptions::default()).unwrap();
        let rel = (rescaled.centers[&100] - base.centers[&100] * s).norm() / (s * base.centers[&100].norm()).max(1.0);
        assert!(rel < 1e-9, "rel {rel}");

        // Scaling all weights leaves the minimizer unchanged.
        let mut reweighted = problem.clone();
        for e in &mut reweighted.edges {
            e.weight *= 7.3;
        }
        let rw = solve_centers(&reweighted, &init, &TranslationOptions::default()).unwrap();
        assert!((rw.centers[&100] - base.centers[&100]).norm() < 1e-10);
    }

    #[test]
    fn two_query_colocalization_does_not_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let (qa, qb): (ImageId, ImageId) = (100, 101);
        let ca = Vector3::new(0.4, 0.1, 0.3);
        let cb = Vector3::new(-0.5, 0.3, -0.2);
        let mut fixed = BTreeMap::new();
        let mut edges = Vec::new();
        for i in 0..3 {
            let origin = 3.5 * random_unit(&mut rng);
            fixed.insert(i as ImageId, origin);
            for (q, c) in [(qa, ca), (qb, cb)] {
                edges.push(TransEdge {
                    source: EdgeSource::Fixed(origin),
                    target: q,
                    direction: (c - origin).normalize(),
                    weight: 1.0,
                    pair: (i as ImageId, q),
                });
            }
        }
        edges.push(TransEdge {
            source: EdgeSource::Unknown(qa),
            target: qb,
            direction: (cb - ca).normalize(),
            weight: 1.0,
            pair: (qa, qb),
        });
        let problem = TranslationProblem::new(fixed, vec![qa, qb], edges);
        let mut init = BTreeMap::new();
        init.insert(qa, ca + Vector3::new(0.2, -0.1, 0.15));
        init.insert(qb, cb + Vector3::new(-0.15, 0.2, 0.1));
        let sol = solve_centers(&problem, &init, &TranslationOptions::default()).unwrap();
        let dist = (sol.centers[&qa] - sol.centers[&qb]).norm();
        assert!(dist >= 0.9 * (ca - cb).norm(), "collapsed: {dist}");
        assert!((sol.centers[&qa] - ca).norm() < 1e-7);
        assert!((sol.centers[&qb] - cb).norm() < 1e-7);
    }

    #[test]
    fn lud_mode_solves_clean_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let target = Vector3::new(0.3, -0.5, 1.2);
        let origins: Vec<Vector3<f64>> = (0..5).map(|_| 4.0 * random_unit(&mut rng)).collect();
        let (problem, init) = anchored_problem(&origins, target, &[1.0]);
        let opts = TranslationOptions { objective: TranslationObjective::Lud, ..Default::default() };
        let sol = solve_centers(&problem, &init, &opts).unwrap();
        assert!((sol.centers[&100] - target).norm() < 1e-6);
    }
}
