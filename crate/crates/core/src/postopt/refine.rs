//! Joint refinement of query pose(s) and track points against fixed
//! database poses, plus the Sampson-only and local-optimization ablation
//! refiners.
//!
//! The joint problem is solved with damped Gauss-Newton steps on a sparse
//! system: point blocks are eliminated by the Schur complement, leaving a
//! dense system over the 6-dof pose block(s).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use crate::geom::{CameraIntrinsics, Pose, Rotation3};
use crate::transavg::{initialize_center, initialize_center_min_norm, Ray};
use crate::twoview::Correspondence;
use crate::ImageId;

use super::{
    PostOptError, RejectReason, Track, TrackStatus, TriangulationOptions, ViewTable,
};

type Mat2x3 = SMatrix<f64, 2, 3>;
type Mat2x6 = SMatrix<f64, 2, 6>;
type Mat6 = SMatrix<f64, 6, 6>;
type Mat6x3 = SMatrix<f64, 6, 3>;
type Vec2 = SVector<f64, 2>;
type Vec6 = SVector<f64, 6>;

/// Unknown pose parameterization of a refinement problem.
#[derive(Debug, Clone)]
pub enum PoseUnknowns {
    /// One 6-dof block per query image.
    PerQuery(BTreeMap<ImageId, Pose>),
    /// One 6-dof rig block; members observe through fixed rig-internal poses.
    Rig { initial: Pose, members: BTreeMap<ImageId, Pose> },
}

#[derive(Debug, Clone)]
pub struct JointOptions {
    /// Huber scale on the pixel reprojection residual norm.
    pub huber_px: f64,
    pub max_iters: usize,
    /// Weight of tracks carrying a single database observation (they
    /// constrain bearing, not scale).
    pub single_db_obs_weight: f64,
    pub tol: f64,
    /// Thresholds for the post-refinement track recheck.
    pub triangulation: TriangulationOptions,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            huber_px: 4.0,
            max_iters: 100,
            single_db_obs_weight: 0.5,
            tol: 1e-12,
            triangulation: TriangulationOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointRefineResult {
    /// Final query poses (member poses in rig mode).
    pub poses: BTreeMap<ImageId, Pose>,
    pub rig_pose: Option<Pose>,
    /// Tracks with refined points; invariant violators re-flagged rejected.
    pub tracks: Vec<Track>,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Mean final reprojection error per triangulated track, pixels.
    pub track_residuals: Vec<f64>,
    pub inlier_observations: usize,
    pub outlier_observations: usize,
}

/// Composes a member pose from the rig pose and its rig-internal pose:
/// `x_member = R_rel (R_rig x + t_rig) + t_rel`.
pub fn compose_member(rig: &Pose, rel: &Pose) -> Pose {
    Pose {
        rotation: rel.rotation * rig.rotation,
        translation: rel.rotation.rotate(&rig.translation) + rel.translation,
    }
}

struct PoseState {
    rotation: Rotation3,
    center: Vector3<f64>,
}

impl PoseState {
    fn from_pose(p: &Pose) -> Self {
        Self { rotation: p.rotation, center: p.camera_center() }
    }

    fn to_pose(&self) -> Pose {
        Pose::from_rotation_center(self.rotation, &self.center)
    }
}

enum ObsCamera {
    /// Fixed database view.
    Fixed(Pose),
    /// Unknown pose block `block`, with an optional rig-internal pose.
    Unknown { block: usize, rel: Option<Pose> },
}

struct ObsSlot {
    camera: ObsCamera,
    intrinsics: CameraIntrinsics,
    pixel: [f64; 2],
}

struct TrackSlot {
    /// Index into the caller's track list.
    track_index: usize,
    obs: Vec<ObsSlot>,
    base_weight: f64,
}

/// Jointly refines query pose(s) and triangulated track points by robust
/// pixel reprojection, holding every database pose constant.
pub fn joint_refine(
    views: &ViewTable,
    unknowns: &PoseUnknowns,
    tracks: &[Track],
    opts: &JointOptions,
) -> Result<JointRefineResult, PostOptError> {
    let mut tracks: Vec<Track> = tracks.to_vec();
    if !tracks.iter().any(|t| t.status == TrackStatus::Triangulated) {
        return Err(PostOptError::NoTracks);
    }

    // Pose blocks.
    let (block_ids, rig_members, mut states): (Vec<ImageId>, Option<BTreeMap<ImageId, Pose>>, Vec<PoseState>) =
        match unknowns {
            PoseUnknowns::PerQuery(poses) => {
                let ids: Vec<ImageId> = poses.keys().copied().collect();
                let states = ids.iter().map(|id| PoseState::from_pose(&poses[id])).collect();
                (ids, None, states)
            }
            PoseUnknowns::Rig { initial, members } => {
                (vec![], Some(members.clone()), vec![PoseState::from_pose(initial)])
            }
        };
    let block_of: BTreeMap<ImageId, usize> =
        block_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut result = JointRefineResult {
        poses: BTreeMap::new(),
        rig_pose: None,
        tracks: Vec::new(),
        converged: false,
        initial_objective: 0.0,
        final_objective: 0.0,
        track_residuals: Vec::new(),
        inlier_observations: 0,
        outlier_observations: 0,
    };

    // Refine, recheck the track invariants, exclude violators, and refine
    // once more if anything was rejected.
    let mut first = true;
    for round in 0..2 {
        let slots = collect_slots(views, &tracks, &block_of, rig_members.as_ref(), opts);
        if slots.is_empty() {
            return Err(PostOptError::NoTracks);
        }
        let mut points: Vec<Vector3<f64>> =
            slots.iter().map(|s| tracks[s.track_index].point.unwrap()).collect();
        let stats = minimize(&slots, &mut states, &mut points, opts);
        if first {
            result.initial_objective = stats.initial_objective;
            first = false;
        }
        result.final_objective = stats.final_objective;
        result.converged = stats.converged;
        for (slot, point) in slots.iter().zip(&points) {
            tracks[slot.track_index].point = Some(*point);
        }

        let rejected = recheck_tracks(views, &mut tracks, &states, &block_of, rig_members.as_ref(), opts);
        if rejected == 0 || round == 1 {
            // Final statistics pass.
            let slots = collect_slots(views, &tracks, &block_of, rig_members.as_ref(), opts);
            let mut residuals: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            let (mut inl, mut outl) = (0usize, 0usize);
            for slot in &slots {
                let point = tracks[slot.track_index].point.unwrap();
                for obs in &slot.obs {
                    if let Some((r, _)) = observe(obs, &states, &point) {
                        let n = r.norm();
                        let e = residuals.entry(slot.track_index).or_insert((0.0, 0));
                        e.0 += n;
                        e.1 += 1;
                        if n <= opts.huber_px {
                            inl += 1;
                        } else {
                            outl += 1;
                        }
                    } else {
                        outl += 1;
                    }
                }
            }
            result.track_residuals =
                residuals.values().map(|(s, n)| s / (*n).max(1) as f64).collect();
            result.inlier_observations = inl;
            result.outlier_observations = outl;
            break;
        }
        if !tracks.iter().any(|t| t.status == TrackStatus::Triangulated) {
            return Err(PostOptError::NoTracks);
        }
    }

    match unknowns {
        PoseUnknowns::PerQuery(_) => {
            for (id, &block) in &block_of {
                result.poses.insert(*id, states[block].to_pose());
            }
        }
        PoseUnknowns::Rig { members, .. } => {
            let rig_pose = states[0].to_pose();
            for (id, rel) in members {
                result.poses.insert(*id, compose_member(&rig_pose, rel));
            }
            result.rig_pose = Some(rig_pose);
        }
    }
    result.tracks = tracks;
    Ok(result)
}

fn collect_slots(
    views: &ViewTable,
    tracks: &[Track],
    block_of: &BTreeMap<ImageId, usize>,
    rig_members: Option<&BTreeMap<ImageId, Pose>>,
    opts: &JointOptions,
) -> Vec<TrackSlot> {
    let mut slots = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        if t.status != TrackStatus::Triangulated {
            continue;
        }
        let mut obs = Vec::new();
        for o in &t.database_observations {
            let (pose, k) = &views.database[&o.image];
            obs.push(ObsSlot { camera: ObsCamera::Fixed(*pose), intrinsics: *k, pixel: o.pixel });
        }
        for o in &t.query_observations {
            let k = *views.intrinsics_of(o.image);
            let camera = match rig_members {
                Some(members) => ObsCamera::Unknown { block: 0, rel: Some(members[&o.image]) },
                None => match block_of.get(&o.image) {
                    Some(&b) => ObsCamera::Unknown { block: b, rel: None },
                    None => continue,
                },
            };
            obs.push(ObsSlot { camera, intrinsics: k, pixel: o.pixel });
        }
        if obs.len() < 2 {
            continue;
        }
        let base_weight = if t.database_observations.len() >= 2 {
            1.0
        } else {
            opts.single_db_obs_weight
        };
        slots.push(TrackSlot { track_index: i, obs, base_weight });
    }
    slots
}

/// Pixel residual and chain pieces for one observation at the current state.
/// Returns None when the point is at or behind the camera plane.
fn observe(
    obs: &ObsSlot,
    states: &[PoseState],
    point: &Vector3<f64>,
) -> Option<(Vec2, ObsJacobians)> {
    let (x_cam, eff_rot, pose_block) = match &obs.camera {
        ObsCamera::Fixed(pose) => (pose.transform(point), pose.rotation, None),
        ObsCamera::Unknown { block, rel } => {
            let st = &states[*block];
            let v = point - st.center;
            match rel {
                None => (st.rotation.rotate(&v), st.rotation, Some((*block, v))),
                Some(rel_pose) => {
                    let eff = rel_pose.rotation * st.rotation;
                    (eff.rotate(&v) + rel_pose.translation, eff, Some((*block, v)))
                }
            }
        }
    };
    if x_cam.z < 1e-9 {
        return None;
    }
    let k = &obs.intrinsics;
    let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
    let r = Vec2::new(
        k.fx * x / z + k.cx - obs.pixel[0],
        k.fy * y / z + k.cy - obs.pixel[1],
    );
    let proj = Mat2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let rot = eff_rot.matrix();
    let j_point = proj * rot;
    let j_pose = pose_block.map(|(block, v)| {
        let mut j = Mat2x6::zeros();
        // d(x_cam)/d(delta) = -R_eff [v]x, d(x_cam)/d(center) = -R_eff.
        let skew_v = crate::twoview::skew(&v);
        let d_rot = -(proj * rot) * skew_v;
        let d_center = -(proj * rot);
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_center);
        (block, j)
    });
    Some((r, ObsJacobians { j_point, j_pose }))
}

struct ObsJacobians {
    j_point: Mat2x3,
    j_pose: Option<(usize, Mat2x6)>,
}

struct MinimizeStats {
    initial_objective: f64,
    final_objective: f64,
    converged: bool,
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

fn minimize(
    slots: &[TrackSlot],
    states: &mut Vec<PoseState>,
    points: &mut Vec<Vector3<f64>>,
    opts: &JointOptions,
) -> MinimizeStats {
    let n_blocks = states.len();
    let objective = |states: &Vec<PoseState>, points: &Vec<Vector3<f64>>| -> f64 {
        let mut total = 0.0;
        for (slot, point) in slots.iter().zip(points) {
            for obs in &slot.obs {
                let c = match observe(obs, states, point) {
                    Some((r, _)) => huber_cost(r.norm(), opts.huber_px),
                    // Behind the camera: charge the saturated huber cost of
                    // a far outlier so cheirality violations are never free.
                    None => huber_cost(1e4, opts.huber_px),
                };
                total += slot.base_weight * c;
            }
        }
        total
    };

    let initial_objective = objective(states, points);
    let mut current = initial_objective;
    let mut lambda = 1e-6;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        // Assemble the normal equations in Schur form.
        let p = 6 * n_blocks;
        let mut u = DMatrix::<f64>::zeros(p, p);
        let mut g_pose = DVector::<f64>::zeros(p);
        let mut v_blocks: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); slots.len()];
        let mut g_pts: Vec<Vector3<f64>> = vec![Vector3::zeros(); slots.len()];
        // Per track: pose-point coupling blocks by pose block index.
        let mut w_blocks: Vec<BTreeMap<usize, Mat6x3>> = vec![BTreeMap::new(); slots.len()];

        for (i, (slot, point)) in slots.iter().zip(points.iter()).enumerate() {
            for obs in &slot.obs {
                let Some((r, jac)) = observe(obs, states, point) else { continue };
                let w = slot.base_weight * huber_weight(r.norm(), opts.huber_px);
                v_blocks[i] += w * jac.j_point.transpose() * jac.j_point;
                g_pts[i] += w * jac.j_point.transpose() * r;
                if let Some((block, j_pose)) = jac.j_pose {
                    let jtj: Mat6 = w * j_pose.transpose() * j_pose;
                    let jtr: Vec6 = w * j_pose.transpose() * r;
                    for a in 0..6 {
                        for b in 0..6 {
                            u[(6 * block + a, 6 * block + b)] += jtj[(a, b)];
                        }
                        g_pose[6 * block + a] += jtr[a];
                    }
                    let w_entry = w_blocks[i].entry(block).or_insert_with(Mat6x3::zeros);
                    *w_entry += w * j_pose.transpose() * jac.j_point;
                }
            }
        }

        let mut stepped = false;
        for _ in 0..10 {
            // Damp, reduce, solve.
            let mut u_d = u.clone();
            for d in 0..p {
                u_d[(d, d)] += lambda * (1.0 + u[(d, d)]);
            }
            let mut v_inv: Vec<Option<Matrix3<f64>>> = Vec::with_capacity(slots.len());
            for v in &v_blocks {
                let mut v_d = *v;
                for d in 0..3 {
                    v_d[(d, d)] += lambda * (1.0 + v[(d, d)]);
                }
                v_inv.push(v_d.try_inverse());
            }
            let mut h_red = u_d.clone();
            let mut b_red = -&g_pose;
            for (i, wmap) in w_blocks.iter().enumerate() {
                let Some(vi) = v_inv[i] else { continue };
                for (&ba, wa) in wmap {
                    let wa_vi = wa * vi;
                    let contrib: Vec6 = wa_vi * g_pts[i];
                    for a in 0..6 {
                        b_red[6 * ba + a] += contrib[a];
                    }
                    for (&bb, wb) in wmap {
                        let block: Mat6 = wa_vi * wb.transpose();
                        for a in 0..6 {
                            for b in 0..6 {
                                h_red[(6 * ba + a, 6 * bb + b)] -= block[(a, b)];
                            }
                        }
                    }
                }
            }
            let Some(delta_pose) = h_red.lu().solve(&b_red) else {
                lambda *= 10.0;
                continue;
            };

            // Back-substitute the points.
            let mut trial_points = points.clone();
            for (i, wmap) in w_blocks.iter().enumerate() {
                let Some(vi) = v_inv[i] else { continue };
                let mut rhs = -g_pts[i];
                for (&b, wb) in wmap {
                    let dp = Vec6::from_iterator((0..6).map(|a| delta_pose[6 * b + a]));
                    rhs -= wb.transpose() * dp;
                }
                trial_points[i] += vi * rhs;
            }
            let mut trial_states: Vec<PoseState> = Vec::with_capacity(n_blocks);
            for (b, st) in states.iter().enumerate() {
                let dr = Vector3::new(delta_pose[6 * b], delta_pose[6 * b + 1], delta_pose[6 * b + 2]);
                let dc = Vector3::new(delta_pose[6 * b + 3], delta_pose[6 * b + 4], delta_pose[6 * b + 5]);
                trial_states.push(PoseState {
                    rotation: st.rotation * Rotation3::exp(&dr),
                    center: st.center + dc,
                });
            }

            let trial_obj = objective(&trial_states, &trial_points);
            if trial_obj <= current {
                let drop = current - trial_obj;
                *states = trial_states;
                *points = trial_points;
                current = trial_obj;
                lambda = (lambda * 0.3).max(1e-14);
                stepped = true;
                if delta_pose.norm() < opts.tol || drop <= opts.tol * current.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    MinimizeStats { initial_objective, final_objective: current, converged }
}

/// Re-validates triangulated tracks against the final geometry; violators
/// are flagged rejected. Returns the number rejected.
fn recheck_tracks(
    views: &ViewTable,
    tracks: &mut [Track],
    states: &[PoseState],
    block_of: &BTreeMap<ImageId, usize>,
    rig_members: Option<&BTreeMap<ImageId, Pose>>,
    opts: &JointOptions,
) -> usize {
    let pose_of = |image: ImageId| -> Option<Pose> {
        if let Some((pose, _)) = views.database.get(&image) {
            return Some(*pose);
        }
        match rig_members {
            Some(members) => Some(compose_member(&states[0].to_pose(), &members[&image])),
            None => block_of.get(&image).map(|&b| states[b].to_pose()),
        }
    };
    let mut rejected = 0;
    for t in tracks.iter_mut() {
        if t.status != TrackStatus::Triangulated {
            continue;
        }
        let point = t.point.unwrap();
        let mut ok = true;
        let mut centers = Vec::new();
        for o in t.database_observations.iter().chain(&t.query_observations) {
            let Some(pose) = pose_of(o.image) else { continue };
            let k = views.intrinsics_of(o.image);
            let c = pose.transform(&point);
            if c.z <= 0.0 {
                ok = false;
                break;
            }
            let px = k.denormalize(&[c.x / c.z, c.y / c.z]);
            let err = ((px[0] - o.pixel[0]).powi(2) + (px[1] - o.pixel[1]).powi(2)).sqrt();
            if err > opts.triangulation.max_reproj_px {
                ok = false;
                break;
            }
            centers.push(pose.camera_center());
        }
        if ok {
            let mut max_angle: f64 = 0.0;
            for i in 0..centers.len() {
                for j in (i + 1)..centers.len() {
                    if let Ok(a) =
                        crate::geom::direction_angle(&(point - centers[i]), &(point - centers[j]))
                    {
                        max_angle = max_angle.max(a);
                    }
                }
            }
            if max_angle < opts.triangulation.min_tri_angle_deg.to_radians() {
                t.status = TrackStatus::Rejected(RejectReason::Angle);
                rejected += 1;
            }
        } else {
            t.status = TrackStatus::Rejected(RejectReason::Reprojection);
            rejected += 1;
        }
    }
    rejected
}

/// One edge of the Sampson-only refinement.
#[derive(Debug, Clone)]
pub struct SampsonEdge {
    pub a: ImageId,
    pub b: ImageId,
    /// Fixed pose when the endpoint is a database image.
    pub a_fixed: Option<Pose>,
    pub b_fixed: Option<Pose>,
    pub weight: f64,
    /// Inlier correspondences in normalized coordinates.
    pub corrs: Vec<Correspondence>,
}

#[derive(Debug, Clone)]
pub struct SampsonResult {
    pub poses: BTreeMap<ImageId, Pose>,
    pub converged: bool,
    /// Set when the normal equations are rank-deficient at the solution
    /// (collinear database motion leaves directions unconstrained).
    pub rank_deficient: bool,
    pub final_cost: f64,
}

/// Ablation mode: refines the query pose(s) by minimizing the summed
/// squared Sampson error over all inlier correspondences of the gated
/// edges. No points are instantiated.
pub fn sampson_refine(
    init: &BTreeMap<ImageId, Pose>,
    edges: &[SampsonEdge],
    max_iters: usize,
) -> Result<SampsonResult, PostOptError> {
    if edges.iter().all(|e| e.corrs.is_empty()) {
        return Err(PostOptError::NoCorrespondences);
    }
    let ids: Vec<ImageId> = init.keys().copied().collect();
    let block_of: BTreeMap<ImageId, usize> =
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut states: Vec<PoseState> =
        ids.iter().map(|id| PoseState::from_pose(&init[id])).collect();
    let n = 6 * states.len();

    let residuals = |states: &Vec<PoseState>| -> DVector<f64> {
        let mut out = Vec::new();
        for e in edges {
            let pose_a = e.a_fixed.unwrap_or_else(|| states[block_of[&e.a]].to_pose());
            let pose_b = e.b_fixed.unwrap_or_else(|| states[block_of[&e.b]].to_pose());
            let r_ab = pose_b.rotation * pose_a.rotation.inverse();
            let t_ab = pose_b.rotation.rotate(&(pose_a.camera_center() - pose_b.camera_center()));
            let scale = t_ab.norm().max(1e-12);
            let em = crate::twoview::skew(&(t_ab / scale)) * r_ab.matrix();
            let sw = e.weight.sqrt();
            for c in &e.corrs {
                out.push(sw * signed_sampson(&em, c));
            }
        }
        DVector::from_vec(out)
    };
    let apply = |states: &Vec<PoseState>, dx: &DVector<f64>| -> Vec<PoseState> {
        states
            .iter()
            .enumerate()
            .map(|(b, st)| PoseState {
                rotation: st.rotation
                    * Rotation3::exp(&Vector3::new(dx[6 * b], dx[6 * b + 1], dx[6 * b + 2])),
                center: st.center + Vector3::new(dx[6 * b + 3], dx[6 * b + 4], dx[6 * b + 5]),
            })
            .collect()
    };

    let mut cost = residuals(&states).norm_squared();
    let mut lambda = 1e-8;
    let mut converged = false;
    let mut last_jtj: Option<DMatrix<f64>> = None;
    const STEP: f64 = 1e-6;
    for _ in 0..max_iters {
        let m = residuals(&states).len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for p in 0..n {
            let mut dp = DVector::zeros(n);
            dp[p] = STEP;
            let rp = residuals(&apply(&states, &dp));
            dp[p] = -STEP;
            let rm = residuals(&apply(&states, &dp));
            jac.set_column(p, &((rp - rm) / (2.0 * STEP)));
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * residuals(&states);
        last_jtj = Some(jtj.clone());
        let mut stepped = false;
        for _ in 0..10 {
            let mut damped = jtj.clone();
            for d in 0..n {
                damped[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = apply(&states, &step);
            let trial_cost = residuals(&trial).norm_squared();
            if trial_cost <= cost {
                let drop = cost - trial_cost;
                states = trial;
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                stepped = true;
                if step.norm() < 1e-12 || drop <= 1e-14 * cost.max(1e-300) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let rank_deficient = match &last_jtj {
        Some(jtj) => {
            let eig = nalgebra::SymmetricEigen::new(jtj.clone());
            let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            max <= 0.0 || min < 1e-9 * max
        }
        None => true,
    };
    let mut poses = BTreeMap::new();
    for (id, &b) in &block_of {
        poses.insert(*id, states[b].to_pose());
    }
    Ok(SampsonResult { poses, converged, rank_deficient, final_cost: cost })
}

fn signed_sampson(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let p1 = Vector3::new(c.p[0], c.p[1], 1.0);
    let p2 = Vector3::new(c.p_prime[0], c.p_prime[1], 1.0);
    let ep1 = e * p1;
    let etp2 = e.transpose() * p2;
    let alg = p2.dot(&ep1);
    let denom = ep1.x * ep1.x + ep1.y * ep1.y + etp2.x * etp2.x + etp2.y * etp2.y;
    if denom <= f64::MIN_POSITIVE {
        return 0.0;
    }
    alg / denom.sqrt()
}

/// Verifies the analytic reprojection Jacobians against central finite
/// differences at random states; returns the largest relative deviation.
pub fn reprojection_gradient_check(samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(480.0, 510.0, 320.0, 240.0);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let center = Vector3::new(
            4.0 * (rng.random::<f64>() - 0.5),
            4.0 * (rng.random::<f64>() - 0.5),
            -3.0 - rng.random::<f64>(),
        );
        let target = Vector3::new(
            0.3 * (rng.random::<f64>() - 0.5),
            0.3 * (rng.random::<f64>() - 0.5),
            0.3 * (rng.random::<f64>() - 0.5),
        );
        let z = (target - center).normalize();
        let up = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x_axis = up.cross(&z).normalize();
        let y_axis = z.cross(&x_axis);
        let m = nalgebra::Matrix3::from_rows(&[
            x_axis.transpose(),
            y_axis.transpose(),
            z.transpose(),
        ]);
        let pose = Pose::from_rotation_center(Rotation3::from_matrix(&m), &center);
        let point = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let st = PoseState::from_pose(&pose);
        let obs = ObsSlot {
            camera: ObsCamera::Unknown { block: 0, rel: None },
            intrinsics: k,
            pixel: [rng.random::<f64>() * 640.0, rng.random::<f64>() * 480.0],
        };
        let states = vec![PoseState { rotation: st.rotation, center: st.center }];
        let Some((_, jac)) = observe(&obs, &states, &point) else { continue };
        let (_, j_pose) = jac.j_pose.unwrap();
        let h = 1e-5;
        let mk = |d: &[f64; 6]| {
            vec![PoseState {
                rotation: st.rotation * Rotation3::exp(&Vector3::new(d[0], d[1], d[2])),
                center: st.center + Vector3::new(d[3], d[4], d[5]),
            }]
        };
        for p in 0..6 {
            let mut d = [0.0; 6];
            d[p] = h;
            let rp = observe(&obs, &mk(&d), &point).unwrap().0;
            d[p] = -h;
            let rm = observe(&obs, &mk(&d), &point).unwrap().0;
            let fd = (rp - rm) / (2.0 * h);
            for row in 0..2 {
                let a = j_pose[(row, p)];
                let denom = a.abs().max(fd[row].abs()).max(1e-3);
                worst = worst.max((a - fd[row]).abs() / denom);
            }
        }
        for p in 0..3 {
            let mut dx = Vector3::zeros();
            dx[p] = h;
            let rp = observe(&obs, &states, &(point + dx)).unwrap().0;
            let rm = observe(&obs, &states, &(point - dx)).unwrap().0;
            let fd = (rp - rm) / (2.0 * h);
            for row in 0..2 {
                let a = jac.j_point[(row, p)];
                let denom = a.abs().max(fd[row].abs()).max(1e-3);
                worst = worst.max((a - fd[row]).abs() / denom);
            }
        }
    }
    worst
}

/// One gated edge's contribution to the local-optimization baseline.
#[derive(Debug, Clone)]
pub struct LocalOptEdge {
    /// Query rotation proposal from this edge.
    pub proposal: Rotation3,
    /// Database camera center.
    pub anchor: Vector3<f64>,
    /// Measured unit translation direction in the second camera's frame.
    pub direction_cam: Vector3<f64>,
}

/// Ablation mode: the query pose as the normalized quaternion average of
/// the rotation proposals plus the ray-intersection center. No iterations.
pub fn local_opt_refine(edges: &[LocalOptEdge]) -> (Rotation3, Vector3<f64>) {
    assert!(!edges.is_empty());
    let reference = edges[0].proposal.wxyz();
    let mut acc = [0.0; 4];
    for e in edges {
        let q = e.proposal.wxyz();
        let dot: f64 = q.iter().zip(&reference).map(|(a, b)| a * b).sum();
        let s = if dot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..4 {
            acc[k] += s * q[k];
        }
    }
    let rotation = Rotation3::from_quaternion(acc[0], acc[1], acc[2], acc[3]);

    let rays: Vec<Ray> = edges
        .iter()
        .map(|e| {
            let d = -rotation.inverse().rotate(&e.direction_cam);
            Ray { origin: e.anchor, direction: d / d.norm() }
        })
        .collect();
    let center = if rays.len() >= 2 {
        initialize_center(&rays).unwrap_or_else(|_| initialize_center_min_norm(&rays))
    } else {
        initialize_center_min_norm(&rays)
    };
    (rotation, center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::relative_pose;
    use crate::postopt::{Observation, TrackStatus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0)
    }

    fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
        let z = (target - center).normalize();
        let up = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let m = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose::from_rotation_center(Rotation3::from_matrix(&m), &center)
    }

    fn pixel_of(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>) -> [f64; 2] {
        let c = pose.transform(x);
        k.denormalize(&[c.x / c.z, c.y / c.z])
    }

    struct Fixture {
        views: ViewTable,
        query_true: Pose,
        tracks: Vec<Track>,
    }

    fn fixture(n_db: usize, n_points: usize, seed: u64) -> Fixture {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut database = BTreeMap::new();
        for i in 0..n_db {
            let a = i as f64 / n_db as f64 * std::f64::consts::TAU;
            let center = Vector3::new(4.0 * a.cos(), 1.5 * (a * 2.0).sin(), 4.0 * a.sin());
            database.insert(i as ImageId, (look_at(center, Vector3::zeros()), k));
        }
        let query_true = look_at(Vector3::new(0.8, 3.6, -1.9), Vector3::zeros());
        let mut query_intrinsics = BTreeMap::new();
        query_intrinsics.insert(100, k);
        let views = ViewTable { database, query_intrinsics };

        let mut tracks = Vec::new();
        for kp in 0..n_points {
            let x = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let track = Track {
                query_observations: vec![Observation {
                    image: 100,
                    keypoint: kp,
                    pixel: pixel_of(&query_true, &k, &x),
                }],
                database_observations: (0..n_db as ImageId)
                    .map(|i| Observation {
                        image: i,
                        keypoint: kp,
                        pixel: pixel_of(&views.database[&i].0, &k, &x),
                    })
                    .collect(),
                point: Some(x),
                status: TrackStatus::Triangulated,
            };
            tracks.push(track);
        }
        Fixture { views, query_true, tracks }
    }

    #[test]
    fn joint_refine_converges_from_perturbed_pose() {
        let f = fixture(5, 60, 70);
        let perturbed = Pose::from_rotation_center(
            f.query_true.rotation * Rotation3::exp(&Vector3::new(0.017, 0.0, 0.0)),
            &(f.query_true.camera_center() + Vector3::new(0.05, -0.08, 0.03)),
        );
        let mut init = BTreeMap::new();
        init.insert(100 as ImageId, perturbed);
        let out = joint_refine(
            &f.views,
            &PoseUnknowns::PerQuery(init),
            &f.tracks,
            &JointOptions::default(),
        )
        .unwrap();
        let pose = out.poses[&100];
        assert!(pose.rotation.angle_to(&f.query_true.rotation) < 1e-7);
        assert!((pose.camera_center() - f.query_true.camera_center()).norm() < 1e-8);
        assert!(out.final_objective <= out.initial_objective);
        assert_eq!(out.outlier_observations, 0);
    }

    #[test]
    fn joint_refine_no_tracks() {
        let f = fixture(3, 4, 71);
        let mut tracks = f.tracks.clone();
        for t in &mut tracks {
            t.status = TrackStatus::Rejected(RejectReason::Angle);
        }
        let mut init = BTreeMap::new();
        init.insert(100 as ImageId, f.query_true);
        let err = joint_refine(
            &f.views,
            &PoseUnknowns::PerQuery(init),
            &tracks,
            &JointOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err, PostOptError::NoTracks);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..100 {
            let center = Vector3::new(
                4.0 * (rng.random::<f64>() - 0.5),
                4.0 * (rng.random::<f64>() - 0.5),
                -3.0 - rng.random::<f64>(),
            );
            let pose = look_at(center, Vector3::zeros());
            let point = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let st = PoseState::from_pose(&pose);
            let obs = ObsSlot {
                camera: ObsCamera::Unknown { block: 0, rel: None },
                intrinsics: k,
                pixel: [11.0, 22.0],
            };
            let states = vec![PoseState { rotation: st.rotation, center: st.center }];
            let Some((r0, jac)) = observe(&obs, &states, &point) else {
                panic!("point unexpectedly behind camera")
            };
            let (_, j_pose) = jac.j_pose.unwrap();
            let h = 1e-5;
            // Pose parameters.
            for p in 0..6 {
                let mut dplus = [0.0; 6];
                dplus[p] = h;
                let mk = |d: &[f64; 6]| {
                    vec![PoseState {
                        rotation: st.rotation
                            * Rotation3::exp(&Vector3::new(d[0], d[1], d[2])),
                        center: st.center + Vector3::new(d[3], d[4], d[5]),
                    }]
                };
                let rp = observe(&obs, &mk(&dplus), &point).unwrap().0;
                dplus[p] = -h;
                let rm = observe(&obs, &mk(&dplus), &point).unwrap().0;
                let fd = (rp - rm) / (2.0 * h);
                for row in 0..2 {
                    let a = j_pose[(row, p)];
                    let denom = a.abs().max(fd[row].abs()).max(1e-3);
                    assert!(
                        (a - fd[row]).abs() / denom < 1e-6,
                        "pose jac mismatch p={p} {a} vs {}",
                        fd[row]
                    );
                }
            }
            // Point parameters.
            for p in 0..3 {
                let mut dx = Vector3::zeros();
                dx[p] = h;
                let rp = observe(&obs, &states, &(point + dx)).unwrap().0;
                let rm = observe(&obs, &states, &(point - dx)).unwrap().0;
                let fd = (rp - rm) / (2.0 * h);
                for row in 0..2 {
                    let a = jac.j_point[(row, p)];
                    let denom = a.abs().max(fd[row].abs()).max(1e-3);
                    assert!((a - fd[row]).abs() / denom < 1e-6);
                }
            }
            let _ = r0;
        }
    }

    #[test]
    fn sampson_refine_exact_generic_scene() {
        let f = fixture(5, 0, 73);
        let k = intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let mut edges = Vec::new();
        for (id, (pose, _)) in &f.views.database {
            let corrs: Vec<Correspondence> = (0..30)
                .map(|i| {
                    let x = Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    );
                    let pa = k.normalize(&pixel_of(pose, &k, &x));
                    let pb = k.normalize(&pixel_of(&f.query_true, &k, &x));
                    Correspondence { p: pa, p_prime: pb, source_indices: (i, i) }
                })
                .collect();
            edges.push(SampsonEdge {
                a: *id,
                b: 100,
                a_fixed: Some(*pose),
                b_fixed: None,
                weight: 1.0,
                corrs,
            });
        }
        let perturbed = Pose::from_rotation_center(
            f.query_true.rotation * Rotation3::exp(&Vector3::new(0.0, 0.012, 0.0)),
            &(f.query_true.camera_center() + Vector3::new(-0.04, 0.06, 0.02)),
        );
        let mut init = BTreeMap::new();
        init.insert(100 as ImageId, perturbed);
        let out = sampson_refine(&init, &edges, 100).unwrap();
        let pose = out.poses[&100];
        assert!(pose.rotation.angle_to(&f.query_true.rotation) < 1e-7);
        assert!((pose.camera_center() - f.query_true.camera_center()).norm() < 1e-7);
        assert!(!out.rank_deficient);
    }

    #[test]
    fn local_opt_single_edge_returns_proposal() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let proposal = Rotation3::exp(&Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ));
        let (rot, _) = local_opt_refine(&[LocalOptEdge {
            proposal,
            anchor: Vector3::zeros(),
            direction_cam: Vector3::x(),
        }]);
        assert!(rot.approx_eq(&proposal, 1e-12));
    }

    #[test]
    fn local_opt_exact_edges_recover_pose() {
        let q_center = Vector3::new(0.4, -0.3, 0.9);
        let q_rot = Rotation3::exp(&Vector3::new(0.2, -0.4, 0.6));
        let query = Pose::from_rotation_center(q_rot, &q_center);
        let mut edges = Vec::new();
        for i in 0..4 {
            let a = i as f64 * 1.3 + 0.4;
            let anchor = Vector3::new(3.5 * a.cos(), 1.2 * (2.0 * a).sin(), 3.5 * a.sin());
            let db = Pose::from_rotation_center(
                Rotation3::exp(&Vector3::new(0.1 * a.sin(), 0.2, -0.1)),
                &anchor,
            );
            let (_, t_ab) = relative_pose(&db, &query);
            edges.push(LocalOptEdge {
                proposal: q_rot,
                anchor,
                direction_cam: t_ab / t_ab.norm(),
            });
        }
        let (rot, center) = local_opt_refine(&edges);
        assert!(rot.angle_to(&q_rot) < 1e-8);
        assert!((center - q_center).norm() < 1e-8);
    }
}
