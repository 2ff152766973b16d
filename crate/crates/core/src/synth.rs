//! Synthetic scene generation: ground-truth cameras, points, projections,
//! matches with labeled noise and outliers, simulated retrieval, database
//! corruption, and fragment/rig problem construction. This is the oracle
//! behind every end-to-end test.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::{relative_pose, CameraIntrinsics, Pose, Rotation3};
use crate::pipeline::LocalizationProblem;
use crate::ImageId;

/// Query image ids start here; database ids count from zero.
pub const QUERY_ID_BASE: ImageId = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("could not find a camera orientation seeing enough points after {0} attempts")]
    InfeasibleSpec(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CameraLayout {
    /// Cameras on a sphere around the point region.
    Sphere { radius: f64 },
    /// Cameras on a straight line offset from the region; queries land on
    /// the same line (the collinear-motion degeneracy).
    Line { direction: Vector3<f64>, spacing: f64, standoff: f64 },
    /// Cameras on a planar grid at a fixed standoff.
    Grid { extent: f64, standoff: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_database: usize,
    pub n_queries: usize,
    pub n_points: usize,
    pub camera_layout: CameraLayout,
    /// Axis-aligned box (min, max) holding the 3D points.
    pub point_region: (Vector3<f64>, Vector3<f64>),
    pub intrinsics: CameraIntrinsics,
    pub pixel_noise_sigma: f64,
    pub match_outlier_rate: f64,
    pub edge_outlier_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_database: 10,
            n_queries: 20,
            n_points: 500,
            camera_layout: CameraLayout::Sphere { radius: 4.0 },
            point_region: (Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5)),
            intrinsics: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0),
            pixel_noise_sigma: 0.0,
            match_outlier_rate: 0.0,
            edge_outlier_rate: 0.0,
            seed: 0,
        }
    }
}

/// One labeled correspondence of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledMatch {
    pub kpt_a: usize,
    pub kpt_b: usize,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Database poses handed to the solver (equal to the true poses unless
    /// corrupted).
    pub database_poses: BTreeMap<ImageId, Pose>,
    pub true_database_poses: BTreeMap<ImageId, Pose>,
    pub query_poses: BTreeMap<ImageId, Pose>,
    pub points: Vec<Vector3<f64>>,
    /// Noisy keypoint pixels per image.
    pub keypoints: BTreeMap<ImageId, Vec<[f64; 2]>>,
    /// Noise-free projections, index-aligned with `keypoints`.
    pub true_keypoints: BTreeMap<ImageId, Vec<[f64; 2]>>,
    /// Ground-truth point index per keypoint.
    pub keypoint_points: BTreeMap<ImageId, Vec<usize>>,
    /// Labeled matches for every database-query pair.
    pub pair_matches: BTreeMap<(ImageId, ImageId), Vec<LabeledMatch>>,
}

fn sphere_dir(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// World-to-camera pose at `center` looking toward `target`.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - center).normalize();
    let up = if z.y.abs() < 0.95 { Vector3::y() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::from_rotation_center(Rotation3::from_matrix(&m), center)
}

/// Generates a scene deterministically from its spec.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    if spec.n_database < 2 {
        return Err(SynthError::InvalidSpec("n_database must be at least 2"));
    }
    if spec.n_database as ImageId >= QUERY_ID_BASE {
        return Err(SynthError::InvalidSpec("too many database images"));
    }
    if !(0.0..1.0).contains(&spec.match_outlier_rate)
        || !(0.0..1.0).contains(&spec.edge_outlier_rate)
    {
        return Err(SynthError::InvalidSpec("outlier rates must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (lo, hi) = spec.point_region;
    let points: Vec<Vector3<f64>> = (0..spec.n_points)
        .map(|_| {
            Vector3::new(
                lo.x + (hi.x - lo.x) * rng.random::<f64>(),
                lo.y + (hi.y - lo.y) * rng.random::<f64>(),
                lo.z + (hi.z - lo.z) * rng.random::<f64>(),
            )
        })
        .collect();
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / points.len().max(1) as f64;
    let diag = (hi - lo).norm();

    // Camera centers by layout.
    let line_frame = |direction: &Vector3<f64>| {
        let d = direction.normalize();
        let aux = if d.z.abs() < 0.99 { Vector3::z() } else { Vector3::x() };
        let n1 = d.cross(&aux).normalize();
        (d, n1)
    };
    let mut db_centers = Vec::with_capacity(spec.n_database);
    for i in 0..spec.n_database {
        let c = match &spec.camera_layout {
            CameraLayout::Sphere { radius } => centroid + sphere_dir(&mut rng) * *radius,
            CameraLayout::Line { direction, spacing, standoff } => {
                let (d, n1) = line_frame(direction);
                let s = (i as f64 - (spec.n_database as f64 - 1.0) / 2.0) * spacing;
                centroid - n1 * *standoff + d * s
            }
            CameraLayout::Grid { extent, standoff } => {
                let side = (spec.n_database as f64).sqrt().ceil() as usize;
                let (gx, gy) = (i % side, i / side);
                let step = if side > 1 { 2.0 * extent / (side - 1) as f64 } else { 0.0 };
                centroid
                    + Vector3::new(-extent + gx as f64 * step, -extent + gy as f64 * step, 0.0)
                    - Vector3::z() * *standoff
            }
        };
        db_centers.push(c);
    }
    let mut query_centers = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        let c = match &spec.camera_layout {
            CameraLayout::Sphere { radius } => {
                centroid + sphere_dir(&mut rng) * (radius * (0.9 + 0.2 * rng.random::<f64>()))
            }
            CameraLayout::Line { direction, spacing, standoff } => {
                let (d, n1) = line_frame(direction);
                let half = (spec.n_database as f64 - 1.0) / 2.0 * spacing;
                let s = (rng.random::<f64>() * 2.0 - 1.0) * half;
                centroid - n1 * *standoff + d * s
            }
            CameraLayout::Grid { extent, standoff } => {
                centroid
                    + Vector3::new(
                        (rng.random::<f64>() * 2.0 - 1.0) * extent,
                        (rng.random::<f64>() * 2.0 - 1.0) * extent,
                        0.0,
                    )
                    - Vector3::z() * *standoff
            }
        };
        query_centers.push(c);
    }

    // Orient each camera at the centroid with jitter until enough points
    // are visible.
    let k = spec.intrinsics;
    let visible_indices = |pose: &Pose| -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let c = pose.transform(p);
                if c.z <= 0.05 {
                    return false;
                }
                let px = k.denormalize(&[c.x / c.z, c.y / c.z]);
                px[0] >= 0.0 && px[0] <= 2.0 * k.cx && px[1] >= 0.0 && px[1] <= 2.0 * k.cy
            })
            .map(|(i, _)| i)
            .collect()
    };
    let required = 50.min(spec.n_points);
    let orient = |center: &Vector3<f64>, rng: &mut ChaCha8Rng| -> Result<Pose, SynthError> {
        for _ in 0..100 {
            let jitter = sphere_dir(rng) * (0.05 * diag * rng.random::<f64>());
            let pose = look_at(center, &(centroid + jitter));
            if visible_indices(&pose).len() >= required {
                return Ok(pose);
            }
        }
        Err(SynthError::InfeasibleSpec(100))
    };

    let mut true_database_poses = BTreeMap::new();
    for (i, c) in db_centers.iter().enumerate() {
        true_database_poses.insert(i as ImageId, orient(c, &mut rng)?);
    }
    let mut query_poses = BTreeMap::new();
    for (i, c) in query_centers.iter().enumerate() {
        query_poses.insert(QUERY_ID_BASE + i as ImageId, orient(c, &mut rng)?);
    }

    // Keypoints: noisy projections of the visible points, with noise drawn
    // from a per-image stream so the layout stays order-independent.
    let mut keypoints = BTreeMap::new();
    let mut true_keypoints = BTreeMap::new();
    let mut keypoint_points = BTreeMap::new();
    let all_poses: Vec<(ImageId, Pose)> = true_database_poses
        .iter()
        .map(|(&id, &p)| (id, p))
        .chain(query_poses.iter().map(|(&id, &p)| (id, p)))
        .collect();
    for (id, pose) in &all_poses {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x6b65_7970, *id));
        let normal = Normal::new(0.0, spec.pixel_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let mut px_list = Vec::new();
        let mut true_list = Vec::new();
        let mut pt_list = Vec::new();
        for idx in visible_indices(pose) {
            let c = pose.transform(&points[idx]);
            let px = k.denormalize(&[c.x / c.z, c.y / c.z]);
            let noisy = if spec.pixel_noise_sigma > 0.0 {
                let mut draw = || loop {
                    let v: f64 = normal.sample(&mut noise_rng);
                    if v.abs() <= 5.0 * spec.pixel_noise_sigma {
                        return v;
                    }
                };
                [px[0] + draw(), px[1] + draw()]
            } else {
                px
            };
            true_list.push(px);
            px_list.push(noisy);
            pt_list.push(idx);
        }
        keypoints.insert(*id, px_list);
        true_keypoints.insert(*id, true_list);
        keypoint_points.insert(*id, pt_list);
    }

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        database_poses: true_database_poses.clone(),
        true_database_poses,
        query_poses,
        points,
        keypoints,
        true_keypoints,
        keypoint_points,
        pair_matches: BTreeMap::new(),
    };
    // Matches for every database-query pair.
    let db_ids: Vec<ImageId> = scene.database_poses.keys().copied().collect();
    let q_ids: Vec<ImageId> = scene.query_poses.keys().copied().collect();
    for &q in &q_ids {
        for &d in &db_ids {
            let m = scene.make_matches(q, d);
            scene.pair_matches.insert((q, d), m);
        }
    }
    Ok(scene)
}

fn mix_seed(seed: u64, salt: u64, id: ImageId) -> u64 {
    crate::twoview::derive_edge_seed(seed ^ salt, id, salt.rotate_left(31))
}

impl SyntheticScene {
    /// Labeled matches of an image pair (a, b) with keypoint indices into
    /// the two tables; deterministic per pair regardless of call order.
    pub fn make_matches(&self, a: ImageId, b: ImageId) -> Vec<LabeledMatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::twoview::derive_edge_seed(
            self.spec.seed ^ 0x6d61_7463,
            a,
            b,
        ));
        let pts_a = &self.keypoint_points[&a];
        let pts_b = &self.keypoint_points[&b];
        let index_b: BTreeMap<usize, usize> =
            pts_b.iter().enumerate().map(|(kpt, &p)| (p, kpt)).collect();
        let mut matches = Vec::new();
        let covisible: Vec<(usize, usize)> = pts_a
            .iter()
            .enumerate()
            .filter_map(|(kpt_a, p)| index_b.get(p).map(|&kpt_b| (kpt_a, kpt_b)))
            .collect();
        if covisible.is_empty() {
            return matches;
        }
        let edge_outlier = rng.random::<f64>() < self.spec.edge_outlier_rate;
        let nb = self.keypoints[&b].len();
        for (kpt_a, kpt_b) in covisible {
            if edge_outlier {
                matches.push(LabeledMatch {
                    kpt_a,
                    kpt_b: rng.random_range(0..nb),
                    is_outlier: true,
                });
            } else if rng.random::<f64>() < self.spec.match_outlier_rate {
                let mut wrong = rng.random_range(0..nb);
                if nb > 1 {
                    while wrong == kpt_b {
                        wrong = rng.random_range(0..nb);
                    }
                }
                matches.push(LabeledMatch { kpt_a, kpt_b: wrong, is_outlier: true });
            } else {
                matches.push(LabeledMatch { kpt_a, kpt_b, is_outlier: false });
            }
        }
        matches
    }

    /// Number of ground-truth points covisible between two images.
    pub fn covisibility(&self, a: ImageId, b: ImageId) -> usize {
        let pts_b: std::collections::BTreeSet<usize> =
            self.keypoint_points[&b].iter().copied().collect();
        self.keypoint_points[&a].iter().filter(|p| pts_b.contains(p)).count()
    }

    /// Simulated retrieval: database images ranked by covisible point
    /// count, ties by center distance then id.
    pub fn retrieve(&self, query: ImageId, top_k: usize) -> Vec<ImageId> {
        let qc = self.query_poses[&query].camera_center();
        let mut ranked: Vec<(usize, f64, ImageId)> = self
            .true_database_poses
            .iter()
            .map(|(&d, pose)| {
                (self.covisibility(query, d), (pose.camera_center() - qc).norm(), d)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then_with(|| a.1.total_cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        ranked.into_iter().take(top_k).map(|(_, _, d)| d).collect()
    }

    /// Ground-truth query poses for evaluation.
    pub fn ground_truth(&self) -> BTreeMap<ImageId, Pose> {
        self.query_poses.clone()
    }
}

/// Adds independent random perturbations to the database poses only: a
/// rotation of the given angle about a uniform axis and a center offset of
/// the given magnitude in a uniform direction. Ground truth is retained.
pub fn corrupt_database(
    scene: &SyntheticScene,
    rot_noise_deg: f64,
    trans_noise: f64,
) -> SyntheticScene {
    let mut out = scene.clone();
    if rot_noise_deg == 0.0 && trans_noise == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.spec.seed ^ 0xc0_4475_7074);
    for (_, pose) in out.database_poses.iter_mut() {
        let rot_axis = sphere_dir(&mut rng);
        let off_dir = sphere_dir(&mut rng);
        let rotation = pose.rotation * Rotation3::exp(&(rot_axis * rot_noise_deg.to_radians()));
        let center = pose.camera_center() + off_dir * trans_noise;
        *pose = Pose::from_rotation_center(rotation, &center);
    }
    out
}

/// Builds a pipeline problem from simulated retrieval.
pub fn make_problem(scene: &SyntheticScene, top_k: usize) -> LocalizationProblem {
    let queries: Vec<ImageId> = scene.query_poses.keys().copied().collect();
    make_problem_for(scene, &queries, top_k, &[])
}

/// Problem over a subset of queries, with the given query-query pairs.
pub fn make_problem_for(
    scene: &SyntheticScene,
    queries: &[ImageId],
    top_k: usize,
    query_query_pairs: &[(ImageId, ImageId)],
) -> LocalizationProblem {
    let k = scene.spec.intrinsics;
    let database: BTreeMap<ImageId, (Pose, CameraIntrinsics)> =
        scene.database_poses.iter().map(|(&id, &p)| (id, (p, k))).collect();
    let mut retrieval_pairs = Vec::new();
    let mut matches = BTreeMap::new();
    let mut used: std::collections::BTreeSet<ImageId> = std::collections::BTreeSet::new();
    for &q in queries {
        for d in scene.retrieve(q, top_k) {
            retrieval_pairs.push((q, d));
            let rows: Vec<(usize, usize)> = scene
                .pair_matches
                .get(&(q, d))
                .map(|ms| ms.iter().map(|m| (m.kpt_a, m.kpt_b)).collect())
                .unwrap_or_default();
            matches.insert((q, d), rows);
            used.insert(d);
        }
        used.insert(q);
    }
    for &(a, b) in query_query_pairs {
        let rows: Vec<(usize, usize)> =
            scene.make_matches(a, b).iter().map(|m| (m.kpt_a, m.kpt_b)).collect();
        matches.insert((a, b), rows);
        used.insert(a);
        used.insert(b);
    }
    let keypoints: BTreeMap<ImageId, Vec<[f64; 2]>> = scene
        .keypoints
        .iter()
        .filter(|(id, _)| used.contains(id))
        .map(|(&id, v)| (id, v.clone()))
        .collect();
    LocalizationProblem {
        database,
        queries: queries.iter().map(|&q| (q, k)).collect(),
        retrieval_pairs,
        query_query_pairs: query_query_pairs.to_vec(),
        rig: None,
        keypoints,
        matches,
    }
}

/// Splits the queries into consecutive, non-overlapping fragments.
pub fn fragments(scene: &SyntheticScene, len: usize) -> Vec<Vec<ImageId>> {
    let ids: Vec<ImageId> = scene.query_poses.keys().copied().collect();
    ids.chunks(len.max(1)).map(|c| c.to_vec()).collect()
}

/// One co-localization problem per fragment: all query pairs inside a
/// fragment become query-query edges.
pub fn make_multiquery_problems(
    scene: &SyntheticScene,
    top_k: usize,
    fragment_len: usize,
) -> Vec<LocalizationProblem> {
    fragments(scene, fragment_len)
        .into_iter()
        .map(|frag| {
            let mut qq = Vec::new();
            for i in 0..frag.len() {
                for j in (i + 1)..frag.len() {
                    qq.push((frag[i], frag[j]));
                }
            }
            make_problem_for(scene, &frag, top_k, &qq)
        })
        .collect()
}

/// One rig problem per fragment: exact rig-internal poses from ground
/// truth (the first member is the rig frame), no query-query matches.
pub fn make_rig_problems(
    scene: &SyntheticScene,
    top_k: usize,
    rig_size: usize,
) -> Vec<LocalizationProblem> {
    fragments(scene, rig_size)
        .into_iter()
        .map(|frag| {
            let rig_frame = scene.query_poses[&frag[0]];
            let rig: BTreeMap<ImageId, Pose> = frag
                .iter()
                .map(|&m| {
                    let (r, t) = relative_pose(&rig_frame, &scene.query_poses[&m]);
                    (m, Pose::new(r, t))
                })
                .collect();
            let mut p = make_problem_for(scene, &frag, top_k, &[]);
            p.rig = Some(rig);
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twoview::skew;

    fn base_spec() -> SceneSpec {
        SceneSpec { n_database: 6, n_queries: 3, n_points: 200, seed: 11, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = base_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_matches_satisfy_epipolar_exactly() {
        let scene = generate(&base_spec()).unwrap();
        let k = scene.spec.intrinsics;
        for (&(q, d), ms) in &scene.pair_matches {
            let (r, t) = relative_pose(&scene.true_database_poses[&d], &scene.query_poses[&q]);
            let e = skew(&(t / t.norm())) * r.matrix();
            for m in ms {
                assert!(!m.is_outlier);
                let pd = k.normalize(&scene.keypoints[&d][m.kpt_b]);
                let pq = k.normalize(&scene.keypoints[&q][m.kpt_a]);
                let x1 = Vector3::new(pd[0], pd[1], 1.0);
                let x2 = Vector3::new(pq[0], pq[1], 1.0);
                // Edge direction: database -> query.
                assert!(x2.dot(&(e * x1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_noise_sigma_is_respected() {
        let spec = SceneSpec {
            pixel_noise_sigma: 1.0,
            n_points: 400,
            n_database: 15,
            n_queries: 10,
            seed: 3,
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for (id, noisy) in &scene.keypoints {
            for (a, b) in noisy.iter().zip(&scene.true_keypoints[id]) {
                sum_sq += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                n += 2;
            }
        }
        assert!(n > 10_000, "need at least 1e4 samples, got {n}");
        let sigma = (sum_sq / n as f64).sqrt();
        assert!((sigma - 1.0).abs() < 0.1, "empirical sigma {sigma}");
        // No perturbation beyond five sigma.
        for (id, noisy) in &scene.keypoints {
            for (a, b) in noisy.iter().zip(&scene.true_keypoints[id]) {
                assert!((a[0] - b[0]).abs() <= 5.0 && (a[1] - b[1]).abs() <= 5.0);
            }
        }
    }

    #[test]
    fn match_outlier_rate_is_respected() {
        let spec = SceneSpec {
            match_outlier_rate: 0.3,
            n_points: 300,
            n_database: 12,
            n_queries: 8,
            seed: 4,
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        let mut outliers = 0usize;
        let mut total = 0usize;
        for ms in scene.pair_matches.values() {
            outliers += ms.iter().filter(|m| m.is_outlier).count();
            total += ms.len();
        }
        assert!(total >= 10_000, "need at least 1e4 correspondences, got {total}");
        let rate = outliers as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.02, "outlier rate {rate}");
    }

    #[test]
    fn corrupt_database_zero_noise_is_identity() {
        let scene = generate(&base_spec()).unwrap();
        let same = corrupt_database(&scene, 0.0, 0.0);
        assert_eq!(scene, same);
    }

    #[test]
    fn corrupt_database_moves_only_database_poses() {
        let scene = generate(&base_spec()).unwrap();
        let noisy = corrupt_database(&scene, 2.0, 0.05);
        assert_eq!(scene.query_poses, noisy.query_poses);
        assert_eq!(scene.true_database_poses, noisy.true_database_poses);
        for (id, pose) in &noisy.database_poses {
            let truth = &scene.true_database_poses[id];
            let rot_err = pose.rotation.angle_to(&truth.rotation).to_degrees();
            let pos_err = (pose.camera_center() - truth.camera_center()).norm();
            assert!((rot_err - 2.0).abs() < 1e-9, "rotation noise {rot_err}");
            assert!((pos_err - 0.05).abs() < 1e-12, "center noise {pos_err}");
        }
    }

    #[test]
    fn retrieval_ranks_by_covisibility() {
        let scene = generate(&base_spec()).unwrap();
        let q = *scene.query_poses.keys().next().unwrap();
        let all = scene.retrieve(q, scene.spec.n_database);
        assert_eq!(all.len(), scene.spec.n_database);
        for w in all.windows(2) {
            assert!(scene.covisibility(q, w[0]) >= scene.covisibility(q, w[1]));
        }
        let top2 = scene.retrieve(q, 2);
        assert_eq!(&all[..2], &top2[..]);
    }

    #[test]
    fn make_problem_passes_validation() {
        let scene = generate(&base_spec()).unwrap();
        let problem = make_problem(&scene, 4);
        problem.check().unwrap();
        assert_eq!(problem.retrieval_pairs.len(), 3 * 4);
        let diag = crate::pipeline::validate(&problem);
        assert!(diag.values().all(|d| !d.scale_unobservable_candidate && !d.disconnected));
    }

    #[test]
    fn line_layout_is_collinear() {
        let spec = SceneSpec {
            camera_layout: CameraLayout::Line {
                direction: Vector3::x(),
                spacing: 0.8,
                standoff: 4.0,
            },
            n_database: 8,
            n_queries: 4,
            n_points: 200,
            seed: 9,
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        let centers: Vec<Vector3<f64>> = scene
            .true_database_poses
            .values()
            .chain(scene.query_poses.values())
            .map(|p| p.camera_center())
            .collect();
        let d = (centers[1] - centers[0]).normalize();
        for c in &centers[2..] {
            let off = (c - centers[0]) - d * d.dot(&(c - centers[0]));
            assert!(off.norm() < 1e-10, "not collinear: {off:?}");
        }
    }
}
