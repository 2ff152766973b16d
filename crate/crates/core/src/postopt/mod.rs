//! Track-based post optimization: build feature tracks from query keypoints
//! through two-view inlier matches, triangulate one 3D point per track
//! against the fixed database poses, and jointly refine query pose(s) and
//! points. Includes the Sampson-only and local-optimization ablation modes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Pose};
use crate::twoview::EdgeKind;
use crate::ImageId;

mod refine;

pub use refine::{
    compose_member, joint_refine, local_opt_refine, reprojection_gradient_check, sampson_refine,
    JointOptions, JointRefineResult, LocalOptEdge, PoseUnknowns, SampsonEdge, SampsonResult,
};

#[derive(Debug, Error, PartialEq)]
pub enum PostOptError {
    #[error("no triangulated tracks; falling back to the averaged pose")]
    NoTracks,
    #[error("no inlier correspondences available for refinement")]
    NoCorrespondences,
}

/// One keypoint observation of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: ImageId,
    pub keypoint: usize,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Reprojection,
    Angle,
    Cheirality,
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Untriangulated,
    Triangulated,
    Rejected(RejectReason),
}

/// A query keypoint linked to its matched database keypoints. Under
/// co-localization one track may collect observations from several query
/// images (merged through query-query inlier matches).
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub query_observations: Vec<Observation>,
    pub database_observations: Vec<Observation>,
    pub point: Option<Vector3<f64>>,
    pub status: TrackStatus,
}

/// Edge input for track building: the inlier keypoint matches of one pair.
#[derive(Debug, Clone)]
pub struct TrackBuildEdge<'a> {
    /// (a, b); `a` is the database image for database-query edges.
    pub pair: (ImageId, ImageId),
    pub kind: EdgeKind,
    pub num_inliers: usize,
    /// Inlier keypoint index pairs (kpt_a, kpt_b).
    pub matches: &'a [(usize, usize)],
}

/// Builds one track per query keypoint that appears in at least one inlier
/// correspondence. Observations from all edges are merged per keypoint;
/// query-query matches union the keypoints of different queries into a
/// single track. A conflicting database observation (same image, different
/// keypoint) resolves toward the edge with more inliers.
pub fn build_tracks(
    keypoints: &BTreeMap<ImageId, Vec<[f64; 2]>>,
    edges: &[TrackBuildEdge],
) -> Vec<Track> {
    // Union-find over query keypoints.
    let mut node_of: BTreeMap<(ImageId, usize), usize> = BTreeMap::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut intern = |parent: &mut Vec<usize>, key: (ImageId, usize)| -> usize {
        *node_of.entry(key).or_insert_with(|| {
            parent.push(parent.len());
            parent.len() - 1
        })
    };
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    // (query node, db image, db keypoint, edge inlier count)
    let mut attachments: Vec<(usize, ImageId, usize, usize)> = Vec::new();
    for e in edges {
        match e.kind {
            EdgeKind::DatabaseQuery => {
                for &(kpt_a, kpt_b) in e.matches {
                    let node = intern(&mut parent, (e.pair.1, kpt_b));
                    attachments.push((node, e.pair.0, kpt_a, e.num_inliers));
                }
            }
            EdgeKind::QueryQuery => {
                for &(kpt_a, kpt_b) in e.matches {
                    let na = intern(&mut parent, (e.pair.0, kpt_a));
                    let nb = intern(&mut parent, (e.pair.1, kpt_b));
                    let (ra, rb) = (find(&mut parent, na), find(&mut parent, nb));
                    if ra != rb {
                        // Deterministic union: smaller root wins.
                        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                        parent[hi] = lo;
                    }
                }
            }
            EdgeKind::RigFixed => {}
        }
    }

    // Group query keypoints by component root.
    let mut components: BTreeMap<usize, Vec<(ImageId, usize)>> = BTreeMap::new();
    for (&key, &node) in &node_of {
        let root = find(&mut parent, node);
        components.entry(root).or_default().push(key);
    }
    let mut db_by_node: BTreeMap<usize, Vec<(ImageId, usize, usize)>> = BTreeMap::new();
    for (node, img, kpt, inl) in attachments {
        let root = find(&mut parent, node);
        db_by_node.entry(root).or_default().push((img, kpt, inl));
    }

    let mut tracks = Vec::new();
    for (root, mut members) in components {
        members.sort_unstable();
        // At most one observation per query image: keep the smallest keypoint.
        let mut query_obs: Vec<Observation> = Vec::new();
        let mut kept_members: Vec<(ImageId, usize)> = Vec::new();
        for (img, kpt) in members {
            if kept_members.last().is_some_and(|&(last, _)| last == img) {
                continue;
            }
            kept_members.push((img, kpt));
            query_obs.push(Observation { image: img, keypoint: kpt, pixel: keypoints[&img][kpt] });
        }

        // Merge database observations; conflicts resolve to the edge with
        // more inliers, then the smaller keypoint index.
        let mut db_obs: BTreeMap<ImageId, (usize, usize)> = BTreeMap::new();
        for (img, kpt, inl) in db_by_node.remove(&root).unwrap_or_default() {
            match db_obs.get(&img) {
                Some(&(cur_kpt, cur_inl)) if (cur_inl, std::cmp::Reverse(cur_kpt)) >= (inl, std::cmp::Reverse(kpt)) => {}
                _ => {
                    db_obs.insert(img, (kpt, inl));
                }
            }
        }
        let database_observations: Vec<Observation> = db_obs
            .into_iter()
            .map(|(img, (kpt, _))| Observation { image: img, keypoint: kpt, pixel: keypoints[&img][kpt] })
            .collect();

        if database_observations.is_empty() && query_obs.len() < 2 {
            continue;
        }
        tracks.push(Track {
            query_observations: query_obs,
            database_observations,
            point: None,
            status: TrackStatus::Untriangulated,
        });
    }
    tracks.sort_by_key(|t| (t.query_observations[0].image, t.query_observations[0].keypoint));
    tracks
}

/// Camera tables for the post optimization stage.
#[derive(Debug, Clone)]
pub struct ViewTable {
    pub database: BTreeMap<ImageId, (Pose, CameraIntrinsics)>,
    pub query_intrinsics: BTreeMap<ImageId, CameraIntrinsics>,
}

impl ViewTable {
    fn intrinsics_of(&self, image: ImageId) -> &CameraIntrinsics {
        self.database
            .get(&image)
            .map(|(_, k)| k)
            .or_else(|| self.query_intrinsics.get(&image))
            .expect("unknown image id in view table")
    }
}

#[derive(Debug, Clone)]
pub struct TriangulationOptions {
    pub min_tri_angle_deg: f64,
    pub max_reproj_px: f64,
    /// When false, only database views triangulate and validate: the query
    /// estimate is untrusted (degenerate translation geometry), so query
    /// observations are kept for refinement but never checked against it.
    pub use_query_estimate: bool,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self { min_tri_angle_deg: 1.0, max_reproj_px: 4.0, use_query_estimate: true }
    }
}

/// Multi-view DLT triangulation of one track with validity checks.
///
/// Tracks seen by two or more database images are triangulated from the
/// database views only, so the point is independent of the current query
/// estimate and anchors metric scale; the query observations are then
/// checked for consistency. Tracks with fewer database views include the
/// current query pose estimates in the DLT. One worst observation may be
/// dropped and the triangulation retried before the track is rejected.
pub fn triangulate_track(
    track: &Track,
    views: &ViewTable,
    query_poses: &BTreeMap<ImageId, Pose>,
    opts: &TriangulationOptions,
) -> Track {
    let mut track = track.clone();
    for round in 0..2 {
        match try_triangulate(&track, views, query_poses, opts) {
            Ok(point) => {
                track.point = Some(point);
                track.status = TrackStatus::Triangulated;
                return track;
            }
            Err(Failure::Fatal(reason)) => {
                track.point = None;
                track.status = TrackStatus::Rejected(reason);
                return track;
            }
            Err(Failure::DropWorst { db_index, query_index, reason }) => {
                if round == 1 {
                    track.point = None;
                    track.status = TrackStatus::Rejected(reason);
                    return track;
                }
                if let Some(i) = db_index {
                    track.database_observations.remove(i);
                } else if let Some(i) = query_index {
                    track.query_observations.remove(i);
                }
                if track.query_observations.is_empty() {
                    track.point = None;
                    track.status = TrackStatus::Rejected(reason);
                    return track;
                }
            }
        }
    }
    track
}

enum Failure {
    Fatal(RejectReason),
    DropWorst { db_index: Option<usize>, query_index: Option<usize>, reason: RejectReason },
}

fn try_triangulate(
    track: &Track,
    views: &ViewTable,
    query_poses: &BTreeMap<ImageId, Pose>,
    opts: &TriangulationOptions,
) -> Result<Vector3<f64>, Failure> {
    let db = &track.database_observations;
    let q = &track.query_observations;

    // Pose + normalized coordinates per observation, database first.
    let mut cams: Vec<(Pose, [f64; 2])> = Vec::with_capacity(db.len() + q.len());
    for o in db {
        let (pose, k) = &views.database[&o.image];
        cams.push((*pose, k.normalize(&o.pixel)));
    }
    if !opts.use_query_estimate {
        if db.len() < 2 {
            return Err(Failure::Fatal(RejectReason::Insufficient));
        }
    } else {
        let mut missing_query_pose = false;
        for o in q {
            match query_poses.get(&o.image) {
                Some(pose) => {
                    let k = &views.query_intrinsics[&o.image];
                    cams.push((*pose, k.normalize(&o.pixel)));
                }
                None => missing_query_pose = true,
            }
        }
        if missing_query_pose && db.len() < 2 {
            return Err(Failure::Fatal(RejectReason::Insufficient));
        }
    }

    let dlt_views: &[(Pose, [f64; 2])] =
        if db.len() >= 2 { &cams[..db.len()] } else { &cams[..] };
    if dlt_views.len() < 2 {
        return Err(Failure::Fatal(RejectReason::Insufficient));
    }

    // Parallax among the triangulating views must be sufficient.
    let point = dlt(dlt_views).ok_or(Failure::Fatal(RejectReason::Angle))?;
    let mut max_angle: f64 = 0.0;
    for i in 0..dlt_views.len() {
        let ci = dlt_views[i].0.camera_center();
        for j in (i + 1)..dlt_views.len() {
            let cj = dlt_views[j].0.camera_center();
            if let Ok(a) = crate::geom::direction_angle(&(point - ci), &(point - cj)) {
                max_angle = max_angle.max(a);
            }
        }
    }
    if max_angle < opts.min_tri_angle_deg.to_radians() {
        return Err(Failure::Fatal(RejectReason::Angle));
    }

    // Cheirality and reprojection over every kept observation.
    let mut worst: Option<(f64, usize)> = None; // (error, index into cams order)
    let eval = |pose: &Pose, k: &CameraIntrinsics, pixel: &[f64; 2]| -> f64 {
        let c = pose.transform(&point);
        if c.z <= 0.0 {
            return f64::INFINITY;
        }
        let px = k.denormalize(&[c.x / c.z, c.y / c.z]);
        ((px[0] - pixel[0]).powi(2) + (px[1] - pixel[1]).powi(2)).sqrt()
    };
    let mut idx = 0;
    for o in db {
        let (pose, k) = &views.database[&o.image];
        let err = eval(pose, k, &o.pixel);
        if worst.is_none_or(|(w, _)| err > w) {
            worst = Some((err, idx));
        }
        idx += 1;
    }
    if opts.use_query_estimate {
        for o in q {
            if let Some(pose) = query_poses.get(&o.image) {
                let k = &views.query_intrinsics[&o.image];
                let err = eval(pose, k, &o.pixel);
                if worst.is_none_or(|(w, _)| err > w) {
                    worst = Some((err, idx));
                }
            }
            idx += 1;
        }
    }
    let (worst_err, worst_idx) = worst.unwrap();
    if worst_err <= opts.max_reproj_px {
        return Ok(point);
    }
    let reason =
        if worst_err.is_finite() { RejectReason::Reprojection } else { RejectReason::Cheirality };
    // Only drop if at least two observations remain afterwards.
    if db.len() + q.len() <= 2 {
        return Err(Failure::Fatal(reason));
    }
    if worst_idx < db.len() {
        Err(Failure::DropWorst { db_index: Some(worst_idx), query_index: None, reason })
    } else {
        Err(Failure::DropWorst { db_index: None, query_index: Some(worst_idx - db.len()), reason })
    }
}

/// Homogeneous multi-view DLT over normalized image coordinates.
fn dlt(views: &[(Pose, [f64; 2])]) -> Option<Vector3<f64>> {
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, (pose, uv)) in views.iter().enumerate() {
        let r = pose.rotation.matrix();
        let t = pose.translation;
        let rows = [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
        ];
        for k in 0..4 {
            a[(2 * i, k)] = uv[0] * rows[2][k] - rows[0][k];
            a[(2 * i + 1, k)] = uv[1] * rows[2][k] - rows[1][k];
        }
    }
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut min_i = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let h = eig.eigenvectors.column(min_i);
    if h[3].abs() < 1e-14 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}
