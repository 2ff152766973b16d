//! Calibrated relative pose estimation for one image pair: a 5-point
//! minimal solver inside a robust sampling loop, essential matrix
//! decomposition with cheirality, Sampson error, and two-view triangulation.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Rotation3;
use crate::ImageId;

mod five_point;

pub use five_point::{eight_point, essential_residual, solve_essential_minimal};

#[derive(Debug, Error, PartialEq)]
pub enum TwoViewError {
    #[error("need at least 5 correspondences, got {got}")]
    InsufficientMatches { got: usize },
    #[error("sample is degenerate for the minimal solver")]
    DegenerateSample,
    #[error("no decomposition places a majority of inliers in front of both cameras")]
    CheiralityAmbiguous,
    #[error("no model reached the minimum inlier count (best had {best_inliers})")]
    NoModelFound { best_inliers: usize },
    #[error("rays are parallel or cameras coincide")]
    DegenerateRay,
}

/// A point match in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Normalized coordinates in the first image.
    pub p: [f64; 2],
    /// Normalized coordinates in the second image.
    pub p_prime: [f64; 2],
    /// Keypoint indices in (first, second) image keypoint tables.
    pub source_indices: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    /// First image is a database image, second is a query.
    DatabaseQuery,
    /// Both images are queries (co-localization).
    QueryQuery,
    /// Fixed rig-internal edge; carries a metric translation.
    RigFixed,
}

/// One pose-graph edge: the relative pose of image B with respect to
/// image A (`x_b = R x_a + t`), with the translation stored as a unit
/// direction except for rig-fixed edges.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseMeasurement {
    pub edge: (ImageId, ImageId),
    pub rotation: Rotation3,
    pub direction: Vector3<f64>,
    /// Indices into the pair's correspondence list.
    pub inliers: Vec<usize>,
    pub num_inliers: usize,
    pub edge_kind: EdgeKind,
    /// True when `direction` is a metric translation (rig-fixed edges).
    pub scaled: bool,
}

impl RelativePoseMeasurement {
    pub fn new(
        edge: (ImageId, ImageId),
        rotation: Rotation3,
        direction: Vector3<f64>,
        inliers: Vec<usize>,
        edge_kind: EdgeKind,
    ) -> Self {
        let scaled = edge_kind == EdgeKind::RigFixed;
        if !scaled {
            debug_assert!((direction.norm() - 1.0).abs() < 1e-12, "direction must be unit");
        }
        let num_inliers = inliers.len();
        Self { edge, rotation, direction, inliers, num_inliers, edge_kind, scaled }
    }

    /// Essential matrix of the measurement: `[t]x R`.
    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.direction) * self.rotation.matrix()
    }
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// First-order (Sampson) approximation of the squared epipolar error.
pub fn sampson_error(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let r = sampson_residual(e, c);
    r * r
}

/// Signed Sampson residual: algebraic residual over the gradient norm.
fn sampson_residual(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let p1 = Vector3::new(c.p[0], c.p[1], 1.0);
    let p2 = Vector3::new(c.p_prime[0], c.p_prime[1], 1.0);
    let ep1 = e * p1;
    let etp2 = e.transpose() * p2;
    let alg = p2.dot(&ep1);
    let denom = ep1.x * ep1.x + ep1.y * ep1.y + etp2.x * etp2.x + etp2.y * etp2.y;
    if denom <= f64::MIN_POSITIVE {
        return if alg == 0.0 { 0.0 } else { f64::INFINITY };
    }
    alg / denom.sqrt()
}

/// Decomposes an essential matrix into the (R, t) candidate that places
/// the most inliers in front of both cameras.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    inliers: &[Correspondence],
) -> Result<(Rotation3, Vector3<f64>), TwoViewError> {
    assert!(!inliers.is_empty(), "cheirality needs at least one inlier");
    let svd = e.svd(true, true);
    let mut u = svd.u.ok_or(TwoViewError::DegenerateSample)?;
    let mut v_t = svd.v_t.ok_or(TwoViewError::DegenerateSample)?;
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();

    let mut best: Option<(usize, usize)> = None; // (positive-depth count, candidate index)
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    for (idx, (r, t)) in candidates.iter().enumerate() {
        let count = inliers
            .iter()
            .filter(|c| depths_in_frames(r, t, c).is_some_and(|(z1, z2)| z1 > 0.0 && z2 > 0.0))
            .count();
        // Mean Sampson error is identical across the four candidates (they
        // share E), so ties fall through to the enumeration order.
        if best.map_or(true, |(bc, _)| count > bc) {
            best = Some((count, idx));
        }
    }
    let (count, idx) = best.unwrap();
    if 2 * count <= inliers.len() {
        return Err(TwoViewError::CheiralityAmbiguous);
    }
    let (r, t) = candidates[idx];
    let dir = t / t.norm();
    Ok((Rotation3::from_matrix(&r), dir))
}

/// Least-squares depths of a correspondence under `x2 = R x1 + t`.
fn depths_in_frames(r: &Matrix3<f64>, t: &Vector3<f64>, c: &Correspondence) -> Option<(f64, f64)> {
    let x1 = Vector3::new(c.p[0], c.p[1], 1.0);
    let x2 = Vector3::new(c.p_prime[0], c.p_prime[1], 1.0);
    // [R x1, -x2] (z1, z2)^T = -t in least squares.
    let a = r * x1;
    let m = Matrix2::new(a.dot(&a), -a.dot(&x2), -a.dot(&x2), x2.dot(&x2));
    let rhs = Vector2::new(-a.dot(t), x2.dot(t));
    let det = m.determinant();
    if det.abs() < 1e-15 {
        return None;
    }
    let z = m.try_inverse()? * rhs;
    Some((z.x, z.y))
}

/// Options for the robust relative pose estimator.
#[derive(Debug, Clone)]
pub struct RansacOptions {
    /// Inlier threshold in normalized coordinates (Sampson error is
    /// compared against its square).
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            threshold: 4.0 / 500.0,
            max_iterations: 10_000,
            confidence: 0.9999,
            min_inliers: 15,
            seed: 0,
        }
    }
}

/// Deterministic per-edge RNG derived from the global seed and the edge
/// endpoints via a splitmix64 chain (documented in the README).
pub fn derive_edge_seed(global_seed: u64, a: ImageId, b: ImageId) -> u64 {
    let mut s = splitmix64(global_seed);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b.rotate_left(17));
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Estimates the relative pose of an image pair by 5-point RANSAC with a
/// non-minimal refit and nonlinear Sampson refinement over the inliers.
pub fn estimate_relative_pose_ransac(
    edge: (ImageId, ImageId),
    edge_kind: EdgeKind,
    corrs: &[Correspondence],
    opts: &RansacOptions,
) -> Result<RelativePoseMeasurement, TwoViewError> {
    let n = corrs.len();
    if n < 5 {
        return Err(TwoViewError::InsufficientMatches { got: n });
    }
    let thr2 = opts.threshold * opts.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    struct Best {
        count: usize,
        cost: f64,
        rotation: Rotation3,
        direction: Vector3<f64>,
        inliers: Vec<usize>,
    }
    let mut best: Option<Best> = None;
    let mut best_raw_count = 0usize;
    let mut iteration_limit = opts.max_iterations.max(1);
    let mut it = 0;
    let mut sample = [Correspondence { p: [0.0; 2], p_prime: [0.0; 2], source_indices: (0, 0) }; 5];

    while it < iteration_limit {
        it += 1;
        let idx = sample_distinct(&mut rng, n);
        for (k, &i) in idx.iter().enumerate() {
            sample[k] = corrs[i];
        }
        let candidates = match solve_essential_minimal(&sample) {
            Ok(c) => c,
            Err(TwoViewError::DegenerateSample) => continue,
            Err(other) => return Err(other),
        };
        for e in &candidates {
            let (count, cost) = score_model(e, corrs, thr2);
            best_raw_count = best_raw_count.max(count);
            let improves = match &best {
                None => count > 0,
                Some(b) => count > b.count || (count == b.count && cost < b.cost),
            };
            if !improves {
                continue;
            }
            let inliers: Vec<usize> =
                (0..n).filter(|&i| sampson_error(e, &corrs[i]) < thr2).collect();
            let inlier_corrs: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
            // Only models with a valid cheirality decomposition may win.
            let Ok((rotation, direction)) = decompose_essential(e, &inlier_corrs) else {
                continue;
            };
            best = Some(Best { count, cost, rotation, direction, inliers });
        }
        if let Some(b) = &best {
            let ratio = b.count as f64 / n as f64;
            iteration_limit = iteration_limit.min(required_iterations(
                ratio,
                opts.confidence,
                opts.max_iterations,
            ));
        }
    }

    let Some(mut b) = best else {
        return Err(TwoViewError::NoModelFound { best_inliers: best_raw_count });
    };
    if b.count < opts.min_inliers {
        return Err(TwoViewError::NoModelFound { best_inliers: b.count });
    }

    // Non-minimal refit plus local refinement; re-classify once after each
    // refinement round so the final inlier set matches the final model.
    for _ in 0..2 {
        let inlier_corrs: Vec<Correspondence> = b.inliers.iter().map(|&i| corrs[i]).collect();
        let mut rotation = b.rotation;
        let mut direction = b.direction;
        if inlier_corrs.len() >= 8 {
            if let Ok(e8) = eight_point(&inlier_corrs) {
                if let Ok((r8, d8)) = decompose_essential(&e8, &inlier_corrs) {
                    rotation = r8;
                    direction = d8;
                }
            }
        }
        let (rotation, direction) = refine_sampson(rotation, direction, &inlier_corrs);
        let e = skew(&direction) * rotation.matrix();
        let inliers: Vec<usize> = (0..n).filter(|&i| sampson_error(&e, &corrs[i]) < thr2).collect();
        let (count, cost) = score_model(&e, corrs, thr2);
        let unchanged = inliers == b.inliers;
        b = Best { count, cost, rotation, direction, inliers };
        if unchanged {
            break;
        }
    }
    if b.count < opts.min_inliers {
        return Err(TwoViewError::NoModelFound { best_inliers: b.count });
    }

    Ok(RelativePoseMeasurement::new(edge, b.rotation, b.direction, b.inliers, edge_kind))
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize) -> [usize; 5] {
    let mut idx = [0usize; 5];
    let mut k = 0;
    while k < 5 {
        let cand = rng.random_range(0..n);
        if !idx[..k].contains(&cand) {
            idx[k] = cand;
            k += 1;
        }
    }
    idx
}

/// MSAC-style score: inlier count plus truncated cost (lower cost wins ties).
fn score_model(e: &Matrix3<f64>, corrs: &[Correspondence], thr2: f64) -> (usize, f64) {
    let mut count = 0;
    let mut cost = 0.0;
    for c in corrs {
        let s = sampson_error(e, c);
        if s < thr2 {
            count += 1;
            cost += s;
        } else {
            cost += thr2;
        }
    }
    (count, cost)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let p_good = inlier_ratio.powi(5);
    if p_good <= f64::MIN_POSITIVE {
        return cap;
    }
    let denom = (1.0 - p_good).ln();
    if denom >= 0.0 {
        return 1;
    }
    let need = ((1.0 - confidence).ln() / denom).ceil();
    if !need.is_finite() || need >= cap as f64 {
        cap
    } else {
        (need as usize).max(1)
    }
}

/// Orthonormal basis of the plane perpendicular to `t`.
pub fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if t.x.abs() <= t.y.abs() && t.x.abs() <= t.z.abs() {
        Vector3::x()
    } else if t.y.abs() <= t.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = t.cross(&a).normalize();
    let b2 = t.cross(&b1).normalize();
    (b1, b2)
}

/// Levenberg-style minimization of the summed squared Sampson residual over
/// a rotation (tangent-space update) and a unit translation (2-parameter
/// sphere chart), using central-difference Jacobians.
fn refine_sampson(
    rotation: Rotation3,
    direction: Vector3<f64>,
    inliers: &[Correspondence],
) -> (Rotation3, Vector3<f64>) {
    use nalgebra::{DMatrix, DVector};

    let mut r = rotation;
    let mut t = direction;
    let n = inliers.len();
    if n < 5 {
        return (r, t);
    }

    let residuals = |r: &Rotation3, t: &Vector3<f64>| -> DVector<f64> {
        let e = skew(t) * r.matrix();
        DVector::from_iterator(n, inliers.iter().map(|c| sampson_residual(&e, c)))
    };
    // The non-minimal refit already nails noise-free data.
    if residuals(&r, &t).norm_squared() < 1e-18 * n as f64 {
        return (r, t);
    }
    let apply = |r: &Rotation3, t: &Vector3<f64>, dx: &DVector<f64>| -> (Rotation3, Vector3<f64>) {
        let dr = Vector3::new(dx[0], dx[1], dx[2]);
        let (b1, b2) = tangent_basis(t);
        let nt = (t + b1 * dx[3] + b2 * dx[4]).normalize();
        (*r * Rotation3::exp(&dr), nt)
    };

    let mut cost = residuals(&r, &t).norm_squared();
    let mut lambda = 1e-8;
    const STEP: f64 = 1e-7;

    for _ in 0..20 {
        let base = residuals(&r, &t);
        let mut jac = DMatrix::<f64>::zeros(n, 5);
        for p in 0..5 {
            let mut dp = DVector::zeros(5);
            dp[p] = STEP;
            let (rp, tp) = apply(&r, &t, &dp);
            dp[p] = -STEP;
            let (rm, tm) = apply(&r, &t, &dp);
            let col = (residuals(&rp, &tp) - residuals(&rm, &tm)) / (2.0 * STEP);
            jac.set_column(p, &col);
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &base;
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj.clone();
            for i in 0..5 {
                damped[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let (rn, tn) = apply(&r, &t, &step);
            let new_cost = residuals(&rn, &tn).norm_squared();
            if new_cost < cost {
                r = rn;
                t = tn;
                let rel_drop = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel_drop < 1e-12 || step.norm() < 1e-14 {
                    return (r, t);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// Linear (DLT) two-view triangulation in world coordinates.
pub fn triangulate_two_view(
    pose1: &crate::geom::Pose,
    pose2: &crate::geom::Pose,
    c: &Correspondence,
) -> Result<Vector3<f64>, TwoViewError> {
    let c1 = pose1.camera_center();
    let c2 = pose2.camera_center();
    if (c1 - c2).norm() < 1e-12 {
        return Err(TwoViewError::DegenerateRay);
    }
    let ray1 = pose1.rotation.inverse().rotate(&Vector3::new(c.p[0], c.p[1], 1.0));
    let ray2 = pose2.rotation.inverse().rotate(&Vector3::new(c.p_prime[0], c.p_prime[1], 1.0));
    let angle = crate::geom::direction_angle(&ray1, &ray2).map_err(|_| TwoViewError::DegenerateRay)?;
    if angle.min(std::f64::consts::PI - angle) < 1e-10 {
        return Err(TwoViewError::DegenerateRay);
    }

    let mut a = Matrix4::<f64>::zeros();
    for (pose, uv, row0) in [(pose1, c.p, 0), (pose2, c.p_prime, 2)] {
        let r = pose.rotation.matrix();
        let t = pose.translation;
        // Projection rows: [R | t].
        let p0 = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x];
        let p1 = [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y];
        let p2 = [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
        for k in 0..4 {
            a[(row0, k)] = uv[0] * p2[k] - p0[k];
            a[(row0 + 1, k)] = uv[1] * p2[k] - p1[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(TwoViewError::DegenerateRay)?;
    let h = v_t.row(3);
    if h[3].abs() < 1e-14 {
        return Err(TwoViewError::DegenerateRay);
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}
