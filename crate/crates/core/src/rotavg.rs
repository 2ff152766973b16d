//! Anchored rotation averaging: database rotations are held fixed and only
//! query rotations are solved, by best-edge initialization followed by L1
//! tangent-space updates and iteratively reweighted least squares.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::geom::Rotation3;
use crate::twoview::RelativePoseMeasurement;
use crate::ImageId;

#[derive(Debug, Error, PartialEq)]
pub enum RotAvgError {
    #[error("query {0} has no edge connecting it to the database")]
    DisconnectedQuery(ImageId),
    #[error("edge ({0}, {1}) connects two fixed images")]
    EdgeBetweenFixed(ImageId, ImageId),
    #[error("edge endpoint {0} is neither fixed nor unknown")]
    UnknownEndpoint(ImageId),
}

/// A relative rotation measurement `x_b = R x_a` between two graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RotEdge {
    pub a: ImageId,
    pub b: ImageId,
    pub rotation: Rotation3,
    pub num_inliers: usize,
}

impl RotEdge {
    pub fn from_measurement(m: &RelativePoseMeasurement) -> Self {
        Self { a: m.edge.0, b: m.edge.1, rotation: m.rotation, num_inliers: m.num_inliers }
    }
}

/// The anchored rotation-averaging graph.
#[derive(Debug, Clone)]
pub struct RotationProblem {
    fixed: BTreeMap<ImageId, Rotation3>,
    unknowns: Vec<ImageId>,
    edges: Vec<RotEdge>,
}

impl RotationProblem {
    pub fn new(
        fixed: BTreeMap<ImageId, Rotation3>,
        mut unknowns: Vec<ImageId>,
        edges: Vec<RotEdge>,
    ) -> Result<Self, RotAvgError> {
        unknowns.sort_unstable();
        unknowns.dedup();
        for e in &edges {
            let a_fixed = fixed.contains_key(&e.a);
            let b_fixed = fixed.contains_key(&e.b);
            if a_fixed && b_fixed {
                return Err(RotAvgError::EdgeBetweenFixed(e.a, e.b));
            }
            for id in [e.a, e.b] {
                if !fixed.contains_key(&id) && unknowns.binary_search(&id).is_err() {
                    return Err(RotAvgError::UnknownEndpoint(id));
                }
            }
        }
        for &u in &unknowns {
            if !edges.iter().any(|e| e.a == u || e.b == u) {
                return Err(RotAvgError::DisconnectedQuery(u));
            }
        }
        Ok(Self { fixed, unknowns, edges })
    }

    pub fn fixed_rotations(&self) -> &BTreeMap<ImageId, Rotation3> {
        &self.fixed
    }

    pub fn unknown_ids(&self) -> &[ImageId] {
        &self.unknowns
    }

    pub fn edges(&self) -> &[RotEdge] {
        &self.edges
    }
}

/// Query rotation proposal from one edge whose `a` endpoint has a known
/// rotation: `R_b = R_ab R_a`.
pub fn rotation_proposal(edge: &RotEdge, rotation_a: &Rotation3) -> Rotation3 {
    edge.rotation * *rotation_a
}

/// Proposal for the opposite orientation (known `b`, unknown `a`).
fn rotation_proposal_reverse(edge: &RotEdge, rotation_b: &Rotation3) -> Rotation3 {
    edge.rotation.inverse() * *rotation_b
}

/// Initializes every unknown rotation: directly from its max-inlier database
/// edge when one exists, otherwise by chaining proposals along max-inlier
/// edges from already-initialized queries. Ties prefer the smaller image id.
pub fn initialize_rotations(
    problem: &RotationProblem,
) -> Result<BTreeMap<ImageId, Rotation3>, RotAvgError> {
    let mut solved: BTreeMap<ImageId, Rotation3> = BTreeMap::new();

    // Database-anchored queries first.
    for &u in &problem.unknowns {
        let mut best: Option<(usize, ImageId, Rotation3)> = None;
        for e in &problem.edges {
            let proposal = if e.b == u && problem.fixed.contains_key(&e.a) {
                Some((e.a, rotation_proposal(e, &problem.fixed[&e.a])))
            } else if e.a == u && problem.fixed.contains_key(&e.b) {
                Some((e.b, rotation_proposal_reverse(e, &problem.fixed[&e.b])))
            } else {
                None
            };
            if let Some((src, rot)) = proposal {
                let better = match &best {
                    None => true,
                    Some((bi, bsrc, _)) => {
                        e.num_inliers > *bi || (e.num_inliers == *bi && src < *bsrc)
                    }
                };
                if better {
                    best = Some((e.num_inliers, src, rot));
                }
            }
        }
        if let Some((_, _, rot)) = best {
            solved.insert(u, rot);
        }
    }

    // Chain the rest through query-query edges, strongest edge first.
    loop {
        let mut best: Option<(usize, ImageId, ImageId, Rotation3)> = None;
        for e in &problem.edges {
            let candidate = if solved.contains_key(&e.a)
                && problem.unknowns.binary_search(&e.b).is_ok()
                && !solved.contains_key(&e.b)
            {
                Some((e.b, e.a, rotation_proposal(e, &solved[&e.a])))
            } else if solved.contains_key(&e.b)
                && problem.unknowns.binary_search(&e.a).is_ok()
                && !solved.contains_key(&e.a)
            {
                Some((e.a, e.b, rotation_proposal_reverse(e, &solved[&e.b])))
            } else {
                None
            };
            if let Some((target, src, rot)) = candidate {
                let better = match &best {
                    None => true,
                    Some((bi, bt, bs, _)) => {
                        e.num_inliers > *bi
                            || (e.num_inliers == *bi && (target, src) < (*bt, *bs))
                    }
                };
                if better {
                    best = Some((e.num_inliers, target, src, rot));
                }
            }
        }
        match best {
            Some((_, target, _, rot)) => {
                solved.insert(target, rot);
            }
            None => break,
        }
    }

    for &u in &problem.unknowns {
        if !solved.contains_key(&u) {
            return Err(RotAvgError::DisconnectedQuery(u));
        }
    }
    Ok(solved)
}

#[derive(Debug, Clone)]
pub struct RotationOptions {
    /// Outer iterations of the L1 (geodesic median / reweighted) phase.
    pub l1_iters: usize,
    /// Iterations of the reweighted least-squares phase.
    pub irls_iters: usize,
    /// Starting scale of the IRLS weight `n_w / (theta^2 + sigma^2)`, radians.
    pub irls_sigma: f64,
    /// Floor for the annealed scale; annealing halves sigma each iteration
    /// so gross outliers lose their residual pull on the fixed point.
    pub sigma_floor: f64,
    /// Stop when the update norm drops below this, radians.
    pub tol: f64,
    /// Inlier count cap for the normalized weight.
    pub inlier_cap: usize,
}

impl Default for RotationOptions {
    fn default() -> Self {
        Self {
            l1_iters: 5,
            irls_iters: 10,
            irls_sigma: 0.1,
            sigma_floor: 1e-4,
            tol: 1e-8,
            inlier_cap: 150,
        }
    }
}

/// One IRLS iteration of the weighted objective, evaluated with that
/// iteration's weights before and after the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsTrace {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct RotationSolution {
    pub rotations: BTreeMap<ImageId, Rotation3>,
    pub converged: bool,
    pub irls_trace: Vec<IrlsTrace>,
}

struct Residual {
    /// Unknown column of endpoint `a`, if any.
    col_a: Option<usize>,
    /// Unknown column of endpoint `b`, if any.
    col_b: Option<usize>,
    omega: Vector3<f64>,
    num_inliers: usize,
}

/// Solves the anchored rotation averaging problem starting from `init`.
///
/// Non-convergence is not an error: the last iterate is returned with the
/// `converged` flag cleared.
pub fn solve_rotations(
    problem: &RotationProblem,
    init: &BTreeMap<ImageId, Rotation3>,
    opts: &RotationOptions,
) -> RotationSolution {
    let unknowns = &problem.unknowns;
    let col_of: BTreeMap<ImageId, usize> =
        unknowns.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut rotations: BTreeMap<ImageId, Rotation3> = init.clone();

    let residuals = |rotations: &BTreeMap<ImageId, Rotation3>| -> Vec<Residual> {
        problem
            .edges
            .iter()
            .map(|e| {
                let ra = problem.fixed.get(&e.a).or_else(|| rotations.get(&e.a)).unwrap();
                let rb = problem.fixed.get(&e.b).or_else(|| rotations.get(&e.b)).unwrap();
                let discrepancy = rb.inverse() * e.rotation * *ra;
                Residual {
                    col_a: col_of.get(&e.a).copied(),
                    col_b: col_of.get(&e.b).copied(),
                    omega: discrepancy.log(),
                    num_inliers: e.num_inliers,
                }
            })
            .collect()
    };

    let apply = |rotations: &mut BTreeMap<ImageId, Rotation3>, delta: &DVector<f64>| {
        for (&id, &col) in &col_of {
            let d = Vector3::new(delta[3 * col], delta[3 * col + 1], delta[3 * col + 2]);
            let r = rotations.get_mut(&id).unwrap();
            *r = *r * Rotation3::exp(&d);
        }
    };

    // Phase 1: L1. A lone unknown takes the Weiszfeld geodesic median of the
    // per-edge tangent vectors; larger graphs emulate the L1 norm with
    // weights 1 / max(theta, eps).
    for _ in 0..opts.l1_iters {
        let res = residuals(&rotations);
        let delta = if unknowns.len() == 1 {
            let points: Vec<Vector3<f64>> = res
                .iter()
                .map(|r| if r.col_b.is_some() { r.omega } else { -r.omega })
                .collect();
            let median = weiszfeld(&points);
            DVector::from_column_slice(median.as_slice())
        } else {
            let weights: Vec<f64> = res.iter().map(|r| 1.0 / r.omega.norm().max(1e-6)).collect();
            match solve_weighted(unknowns.len(), &res, &weights) {
                Some(d) => d,
                None => break,
            }
        };
        apply(&mut rotations, &delta);
        if delta.norm() < opts.tol {
            break;
        }
    }

    // Phase 2: IRLS with inlier-count weights and an annealed scale.
    let cap = opts.inlier_cap.max(1) as f64;
    let mut converged = false;
    let mut trace = Vec::with_capacity(opts.irls_iters);
    let mut sigma = opts.irls_sigma;
    for _ in 0..opts.irls_iters {
        let res = residuals(&rotations);
        let s2 = sigma * sigma;
        let weights: Vec<f64> = res
            .iter()
            .map(|r| {
                let nw = (r.num_inliers as f64).min(cap) / cap;
                nw / (r.omega.norm_squared() + s2)
            })
            .collect();
        let objective = |res: &[Residual]| -> f64 {
            res.iter().zip(&weights).map(|(r, w)| w * r.omega.norm_squared()).sum()
        };
        let before = objective(&res);
        let Some(mut delta) = solve_weighted(unknowns.len(), &res, &weights) else {
            break;
        };

        // Damp the step if the linearization overshoots, so the weighted
        // objective never increases within an iteration.
        let mut after = before;
        let mut accepted = false;
        let mut saved = rotations.clone();
        for _ in 0..12 {
            let mut trial = saved.clone();
            apply(&mut trial, &delta);
            let trial_obj = objective(&residuals(&trial));
            if trial_obj <= before {
                rotations = trial;
                after = trial_obj;
                accepted = true;
                break;
            }
            delta *= 0.5;
        }
        if !accepted {
            rotations = std::mem::take(&mut saved);
            trace.push(IrlsTrace { before, after: before });
            break;
        }
        trace.push(IrlsTrace { before, after });
        sigma = (sigma * 0.5).max(opts.sigma_floor);
        if delta.norm() < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        // Treat a fully quiescent final state as converged as well.
        let res = residuals(&rotations);
        let max_res = res.iter().map(|r| r.omega.norm()).fold(0.0, f64::max);
        converged = max_res < opts.tol || opts.irls_iters == 0;
    }

    RotationSolution { rotations, converged, irls_trace: trace }
}

/// Weighted least squares for the stacked system: each edge contributes
/// `beta_b - beta_a = omega` with identity blocks on unknown columns only.
fn solve_weighted(n: usize, res: &[Residual], weights: &[f64]) -> Option<DVector<f64>> {
    let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
    let mut g = DVector::<f64>::zeros(3 * n);
    for (r, &w) in res.iter().zip(weights) {
        match (r.col_a, r.col_b) {
            (Some(a), Some(b)) => {
                for k in 0..3 {
                    h[(3 * a + k, 3 * a + k)] += w;
                    h[(3 * b + k, 3 * b + k)] += w;
                    h[(3 * a + k, 3 * b + k)] -= w;
                    h[(3 * b + k, 3 * a + k)] -= w;
                    g[3 * b + k] += w * r.omega[k];
                    g[3 * a + k] -= w * r.omega[k];
                }
            }
            (None, Some(b)) => {
                for k in 0..3 {
                    h[(3 * b + k, 3 * b + k)] += w;
                    g[3 * b + k] += w * r.omega[k];
                }
            }
            (Some(a), None) => {
                for k in 0..3 {
                    h[(3 * a + k, 3 * a + k)] += w;
                    g[3 * a + k] -= w * r.omega[k];
                }
            }
            (None, None) => {}
        }
    }
    h.lu().solve(&g)
}

/// Euclidean geometric median by Weiszfeld iteration.
fn weiszfeld(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    let mut x: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    for _ in 0..50 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for p in points {
            let d = (p - x).norm().max(1e-12);
            num += p / d;
            den += 1.0 / d;
        }
        let next = num / den;
        let step = (next - x).norm();
        x = next;
        if step < 1e-14 {
            break;
        }
    }
    x
}
