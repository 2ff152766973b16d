//! End-to-end orchestration: per-pair relative pose estimation, anchored
//! rotation averaging, translation averaging, and post optimization, with
//! multi-query co-localization and camera-rig extensions.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Pose, Rotation3};
use crate::postopt::{
    build_tracks, compose_member, joint_refine, local_opt_refine, sampson_refine,
    triangulate_track, JointOptions, LocalOptEdge, PoseUnknowns, SampsonEdge, TrackBuildEdge,
    TrackStatus, TriangulationOptions, ViewTable,
};
use crate::rotavg::{
    initialize_rotations, solve_rotations, RotAvgError, RotEdge, RotationOptions, RotationProblem,
};
use crate::transavg::{
    gate_edges, initialize_center, initialize_center_min_norm, refine_relative_translation,
    solve_centers, world_direction, EdgeSource, Ray, TransAvgError, TransEdge, TranslationObjective,
    TranslationOptions, TranslationProblem,
};
use crate::twoview::{
    derive_edge_seed, estimate_relative_pose_ransac, Correspondence, EdgeKind, RansacOptions,
    RelativePoseMeasurement,
};
use crate::ImageId;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("image {0} referenced by {1} does not exist")]
    UnknownImage(ImageId, &'static str),
    #[error("image id {0} is both a database and a query image")]
    DuplicateImage(ImageId),
    #[error("match index {index} out of range for pair ({}, {})", pair.0, pair.1)]
    MatchIndexOutOfRange { pair: (ImageId, ImageId), index: usize },
    #[error("rig mode requires a rig-internal pose for query {0}")]
    RigMemberMissing(ImageId),
    #[error("problem contains no queries")]
    EmptyProblem,
}

/// The full solver input: fixed database poses, query intrinsics, retrieval
/// pairs, optional query-query pairs and rig calibration, keypoints and
/// per-pair matches.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationProblem {
    pub database: BTreeMap<ImageId, (Pose, CameraIntrinsics)>,
    pub queries: BTreeMap<ImageId, CameraIntrinsics>,
    /// (query id, database id), as retrieved.
    pub retrieval_pairs: Vec<(ImageId, ImageId)>,
    /// (query id, query id) co-localization pairs.
    pub query_query_pairs: Vec<(ImageId, ImageId)>,
    /// Rig-internal pose per query (camera-rig mode).
    pub rig: Option<BTreeMap<ImageId, Pose>>,
    /// Keypoint pixel tables per image.
    pub keypoints: BTreeMap<ImageId, Vec<[f64; 2]>>,
    /// Keypoint index matches per pair, keyed exactly as the pair lists
    /// name them: retrieval pairs use (kpt_query, kpt_database) rows.
    pub matches: BTreeMap<(ImageId, ImageId), Vec<(usize, usize)>>,
}

impl LocalizationProblem {
    /// Structural validation; returns the first hard error found.
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.queries.is_empty() {
            return Err(PipelineError::EmptyProblem);
        }
        for id in self.queries.keys() {
            if self.database.contains_key(id) {
                return Err(PipelineError::DuplicateImage(*id));
            }
        }
        for &(q, d) in &self.retrieval_pairs {
            if !self.queries.contains_key(&q) {
                return Err(PipelineError::UnknownImage(q, "retrieval pair"));
            }
            if !self.database.contains_key(&d) {
                return Err(PipelineError::UnknownImage(d, "retrieval pair"));
            }
        }
        for &(a, b) in &self.query_query_pairs {
            for id in [a, b] {
                if !self.queries.contains_key(&id) {
                    return Err(PipelineError::UnknownImage(id, "query-query pair"));
                }
            }
        }
        for (&(a, b), rows) in &self.matches {
            for id in [a, b] {
                if !self.keypoints.contains_key(&id) {
                    return Err(PipelineError::UnknownImage(id, "match file"));
                }
            }
            let (na, nb) = (self.keypoints[&a].len(), self.keypoints[&b].len());
            for &(ka, kb) in rows {
                if ka >= na {
                    return Err(PipelineError::MatchIndexOutOfRange { pair: (a, b), index: ka });
                }
                if kb >= nb {
                    return Err(PipelineError::MatchIndexOutOfRange { pair: (a, b), index: kb });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Independent,
    Colocalize,
    Rig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostMode {
    Full,
    None,
    Sampson,
    LocalOpt,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub mode: SolveMode,
    pub post_mode: PostMode,
    pub trans_objective: TranslationObjective,
    /// Two-view inlier threshold in pixels; converted per edge via the
    /// largest focal length of the pair.
    pub threshold_px: f64,
    pub min_inliers: usize,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    pub rotation: RotationOptions,
    pub translation: TranslationOptions,
    pub joint: JointOptions,
    /// Rotation-consistency gate for translation averaging, degrees.
    pub gate_deg: f64,
    /// Inlier-count weight cap shared by the averaging stages.
    pub inlier_cap: usize,
    /// Re-optimize each gated edge's translation direction with the solved
    /// rotations before averaging.
    pub refine_translations: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: SolveMode::Independent,
            post_mode: PostMode::Full,
            trans_objective: TranslationObjective::Angular,
            threshold_px: 4.0,
            min_inliers: 15,
            ransac_max_iterations: 10_000,
            ransac_confidence: 0.9999,
            rotation: RotationOptions::default(),
            translation: TranslationOptions::default(),
            joint: JointOptions::default(),
            gate_deg: 5.0,
            inlier_cap: 150,
            refine_translations: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryFlags {
    pub converged: bool,
    pub scale_unobservable: bool,
    pub degenerate_geometry: bool,
    pub no_tracks: bool,
    pub disconnected: bool,
    pub rank_deficient: bool,
}

impl QueryFlags {
    pub fn fatal(&self) -> bool {
        self.disconnected || self.scale_unobservable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryReport {
    pub query: ImageId,
    /// Solved rotation after rotation averaging.
    pub rotation_stage: Option<Rotation3>,
    /// Pose after translation averaging.
    pub transavg_pose: Option<Pose>,
    /// Pose after the configured post stage; absent on fatal flags.
    pub final_pose: Option<Pose>,
    /// Pairs that passed the rotation-consistency gate.
    pub gated_edges: Vec<(ImageId, ImageId)>,
    /// Rotation residual (degrees) of every estimated edge of this query.
    pub edge_residual_deg: Vec<((ImageId, ImageId), f64)>,
    pub n_edges_estimated: usize,
    pub n_tracks: usize,
    pub n_tracks_triangulated: usize,
    pub flags: QueryFlags,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub two_view_ms: f64,
    pub rotation_ms: f64,
    pub translation_ms: f64,
    pub post_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub queries: BTreeMap<ImageId, QueryReport>,
    /// Pairs whose two-view estimation failed, with the reason.
    pub dropped_edges: Vec<((ImageId, ImageId), String)>,
    /// Informational; excluded from determinism comparisons.
    pub timings: StageTimings,
}

impl SolveReport {
    /// Equality ignoring wall-clock fields.
    pub fn same_result(&self, other: &SolveReport) -> bool {
        self.queries == other.queries && self.dropped_edges == other.dropped_edges
    }
}

/// Per-query pre-solve diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diagnosis {
    pub retrieval_pairs: usize,
    pub query_query_pairs: usize,
    /// Fewer than 2 retrieval pairs and no rescue through co-localization
    /// connectivity: the metric scale cannot be observed.
    pub scale_unobservable_candidate: bool,
    pub disconnected: bool,
}

/// Diagnoses each query before solving (pure analysis, no failure).
pub fn validate(problem: &LocalizationProblem) -> BTreeMap<ImageId, Diagnosis> {
    let mut counts: BTreeMap<ImageId, (usize, usize)> = BTreeMap::new();
    for id in problem.queries.keys() {
        counts.insert(*id, (0, 0));
    }
    for &(q, _) in &problem.retrieval_pairs {
        if let Some(c) = counts.get_mut(&q) {
            c.0 += 1;
        }
    }
    for &(a, b) in &problem.query_query_pairs {
        for id in [a, b] {
            if let Some(c) = counts.get_mut(&id) {
                c.1 += 1;
            }
        }
    }
    // Connected components over query-query pairs: a query is rescued when
    // its component collects at least 2 retrieval pairs in total.
    let ids: Vec<ImageId> = problem.queries.keys().copied().collect();
    let index: BTreeMap<ImageId, usize> = ids.iter().enumerate().map(|(i, &q)| (q, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in &problem.query_query_pairs {
        let (ra, rb) = (find(&mut parent, index[&a]), find(&mut parent, index[&b]));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut component_pairs: BTreeMap<usize, usize> = BTreeMap::new();
    for (&q, &(retr, _)) in &counts {
        let root = find(&mut parent, index[&q]);
        *component_pairs.entry(root).or_insert(0) += retr;
    }

    let mut out = BTreeMap::new();
    for (&q, &(retr, qq)) in &counts {
        let root = find(&mut parent, index[&q]);
        let component_total = component_pairs[&root];
        out.insert(
            q,
            Diagnosis {
                retrieval_pairs: retr,
                query_query_pairs: qq,
                scale_unobservable_candidate: retr < 2 && component_total < 2,
                disconnected: retr == 0 && qq == 0,
            },
        );
    }
    out
}

/// Output of the two-view stage.
#[derive(Debug, Clone)]
pub struct EstimatedEdges {
    pub edges: Vec<RelativePoseMeasurement>,
    pub dropped: Vec<((ImageId, ImageId), String)>,
}

/// Normalized correspondences of one pair, oriented so the first image is
/// the edge's `a` endpoint.
fn pair_correspondences(
    problem: &LocalizationProblem,
    pair: (ImageId, ImageId),
    kind: EdgeKind,
) -> (Vec<Correspondence>, f64) {
    // For retrieval pairs the stored rows are (kpt_query, kpt_database) but
    // the edge runs database -> query.
    let (a, b, flip) = match kind {
        EdgeKind::DatabaseQuery => (pair.1, pair.0, true),
        _ => (pair.0, pair.1, false),
    };
    let ka = intrinsics_of(problem, a);
    let kb = intrinsics_of(problem, b);
    let rows = problem.matches.get(&pair).map(Vec::as_slice).unwrap_or(&[]);
    let corrs = rows
        .iter()
        .map(|&(k0, k1)| {
            let (kpt_a, kpt_b) = if flip { (k1, k0) } else { (k0, k1) };
            Correspondence {
                p: ka.normalize(&problem.keypoints[&a][kpt_a]),
                p_prime: kb.normalize(&problem.keypoints[&b][kpt_b]),
                source_indices: (kpt_a, kpt_b),
            }
        })
        .collect();
    let focal = ka.max_focal().max(kb.max_focal());
    (corrs, focal)
}

fn intrinsics_of(problem: &LocalizationProblem, image: ImageId) -> CameraIntrinsics {
    problem
        .database
        .get(&image)
        .map(|(_, k)| *k)
        .or_else(|| problem.queries.get(&image).copied())
        .expect("validated image id")
}

/// Runs robust two-view estimation for every pair required by the mode.
/// Pairs are independent and estimated in parallel; failures are dropped
/// and recorded.
pub fn estimate_edges(problem: &LocalizationProblem, config: &SolverConfig) -> EstimatedEdges {
    let mut jobs: Vec<((ImageId, ImageId), EdgeKind)> = problem
        .retrieval_pairs
        .iter()
        .map(|&(q, d)| ((q, d), EdgeKind::DatabaseQuery))
        .collect();
    if config.mode == SolveMode::Colocalize {
        jobs.extend(problem.query_query_pairs.iter().map(|&p| (p, EdgeKind::QueryQuery)));
    }

    let results: Vec<Result<RelativePoseMeasurement, ((ImageId, ImageId), String)>> = jobs
        .par_iter()
        .map(|&(pair, kind)| {
            let (corrs, focal) = pair_correspondences(problem, pair, kind);
            let edge = match kind {
                EdgeKind::DatabaseQuery => (pair.1, pair.0),
                _ => pair,
            };
            let opts = RansacOptions {
                threshold: config.threshold_px / focal,
                max_iterations: config.ransac_max_iterations,
                confidence: config.ransac_confidence,
                min_inliers: config.min_inliers,
                seed: derive_edge_seed(config.seed, edge.0, edge.1),
            };
            estimate_relative_pose_ransac(edge, kind, &corrs, &opts)
                .map_err(|e| (pair, e.to_string()))
        })
        .collect();

    let mut edges = Vec::new();
    let mut dropped = Vec::new();
    for r in results {
        match r {
            Ok(m) => edges.push(m),
            Err(d) => dropped.push(d),
        }
    }
    EstimatedEdges { edges, dropped }
}

/// Full solve: two-view stage then motion averaging and post optimization.
pub fn localize(
    problem: &LocalizationProblem,
    config: &SolverConfig,
) -> Result<SolveReport, PipelineError> {
    problem.check()?;
    let t0 = Instant::now();
    let estimated = estimate_edges(problem, config);
    let two_view_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut report = solve_with_edges(problem, &estimated, config)?;
    report.timings.two_view_ms = two_view_ms;
    Ok(report)
}

/// Motion averaging and post optimization on top of already-estimated
/// edges (lets ablations share one two-view stage).
pub fn solve_with_edges(
    problem: &LocalizationProblem,
    estimated: &EstimatedEdges,
    config: &SolverConfig,
) -> Result<SolveReport, PipelineError> {
    problem.check()?;
    if config.mode == SolveMode::Rig {
        let rig = problem.rig.as_ref().ok_or(PipelineError::RigMemberMissing(
            *problem.queries.keys().next().unwrap(),
        ))?;
        for id in problem.queries.keys() {
            if !rig.contains_key(id) {
                return Err(PipelineError::RigMemberMissing(*id));
            }
        }
    }

    // Group queries into independent work units.
    let groups: Vec<Vec<ImageId>> = match config.mode {
        SolveMode::Independent => problem.queries.keys().map(|&q| vec![q]).collect(),
        SolveMode::Rig => vec![problem.queries.keys().copied().collect()],
        SolveMode::Colocalize => {
            let ids: Vec<ImageId> = problem.queries.keys().copied().collect();
            let index: BTreeMap<ImageId, usize> =
                ids.iter().enumerate().map(|(i, &q)| (q, i)).collect();
            let mut parent: Vec<usize> = (0..ids.len()).collect();
            fn find(parent: &mut [usize], mut x: usize) -> usize {
                while parent[x] != x {
                    parent[x] = parent[parent[x]];
                    x = parent[x];
                }
                x
            }
            for e in &estimated.edges {
                if e.edge_kind == EdgeKind::QueryQuery {
                    let (ra, rb) =
                        (find(&mut parent, index[&e.edge.0]), find(&mut parent, index[&e.edge.1]));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
            let mut by_root: BTreeMap<usize, Vec<ImageId>> = BTreeMap::new();
            for (&q, &i) in &index {
                by_root.entry(find(&mut parent, i)).or_default().push(q);
            }
            by_root.into_values().collect()
        }
    };

    let group_reports: Vec<(Vec<(ImageId, QueryReport)>, StageTimings)> = groups
        .par_iter()
        .map(|group| solve_group(problem, estimated, config, group))
        .collect();

    let mut queries = BTreeMap::new();
    let mut timings = StageTimings::default();
    for (reports, t) in group_reports {
        for (id, r) in reports {
            queries.insert(id, r);
        }
        timings.rotation_ms += t.rotation_ms;
        timings.translation_ms += t.translation_ms;
        timings.post_ms += t.post_ms;
    }
    Ok(SolveReport { queries, dropped_edges: estimated.dropped.clone(), timings })
}

/// Rig reduction: re-express a database->member measurement as a
/// database->rig-node edge (`R_rel^T R_ab`), and shift the translation
/// anchor by the member's offset in the rig frame.
struct RigContext {
    node: ImageId,
    members: BTreeMap<ImageId, Pose>,
}

fn solve_group(
    problem: &LocalizationProblem,
    estimated: &EstimatedEdges,
    config: &SolverConfig,
    group: &[ImageId],
) -> (Vec<(ImageId, QueryReport)>, StageTimings) {
    let mut timings = StageTimings::default();
    let in_group = |id: ImageId| group.contains(&id);
    let mut reports: BTreeMap<ImageId, QueryReport> = group
        .iter()
        .map(|&q| {
            (
                q,
                QueryReport {
                    query: q,
                    rotation_stage: None,
                    transavg_pose: None,
                    final_pose: None,
                    gated_edges: Vec::new(),
                    edge_residual_deg: Vec::new(),
                    n_edges_estimated: 0,
                    n_tracks: 0,
                    n_tracks_triangulated: 0,
                    flags: QueryFlags::default(),
                },
            )
        })
        .collect();

    // Group edges: database-query edges of members plus in-group
    // query-query edges.
    let edges: Vec<&RelativePoseMeasurement> = estimated
        .edges
        .iter()
        .filter(|e| match e.edge_kind {
            EdgeKind::DatabaseQuery => in_group(e.edge.1),
            EdgeKind::QueryQuery => in_group(e.edge.0) && in_group(e.edge.1),
            EdgeKind::RigFixed => false,
        })
        .collect();
    for e in &edges {
        for id in [e.edge.0, e.edge.1] {
            if let Some(r) = reports.get_mut(&id) {
                r.n_edges_estimated += 1;
            }
        }
    }

    let rig = match config.mode {
        SolveMode::Rig => {
            let members = problem.rig.as_ref().unwrap();
            Some(RigContext {
                node: *group.iter().min().unwrap(),
                members: group.iter().map(|&m| (m, members[&m])).collect(),
            })
        }
        _ => None,
    };

    // ---- Rotation averaging ----
    let t_rot = Instant::now();
    let fixed_rotations: BTreeMap<ImageId, Rotation3> =
        problem.database.iter().map(|(&id, (p, _))| (id, p.rotation)).collect();
    let rot_edges: Vec<RotEdge> = edges
        .iter()
        .map(|e| match &rig {
            Some(ctx) if e.edge_kind == EdgeKind::DatabaseQuery => RotEdge {
                a: e.edge.0,
                b: ctx.node,
                rotation: ctx.members[&e.edge.1].rotation.inverse() * e.rotation,
                num_inliers: e.num_inliers,
            },
            _ => RotEdge::from_measurement(e),
        })
        .collect();
    let unknown_ids: Vec<ImageId> = match &rig {
        Some(ctx) => vec![ctx.node],
        None => group.to_vec(),
    };
    let rot_problem = match RotationProblem::new(fixed_rotations.clone(), unknown_ids, rot_edges) {
        Ok(p) => p,
        Err(RotAvgError::DisconnectedQuery(_)) | Err(_) => {
            for r in reports.values_mut() {
                r.flags.disconnected = true;
            }
            return (reports.into_iter().collect(), timings);
        }
    };
    let init = match initialize_rotations(&rot_problem) {
        Ok(i) => i,
        Err(_) => {
            for r in reports.values_mut() {
                r.flags.disconnected = true;
            }
            return (reports.into_iter().collect(), timings);
        }
    };
    let rot_solution = solve_rotations(&rot_problem, &init, &config.rotation);
    // Absolute rotations of every node (queries composed through the rig).
    let mut rotations: BTreeMap<ImageId, Rotation3> = fixed_rotations;
    match &rig {
        Some(ctx) => {
            let rig_rotation = rot_solution.rotations[&ctx.node];
            for (&m, rel) in &ctx.members {
                rotations.insert(m, rel.rotation * rig_rotation);
            }
        }
        None => {
            for (&q, r) in &rot_solution.rotations {
                rotations.insert(q, *r);
            }
        }
    }
    for (&q, r) in reports.iter_mut() {
        r.rotation_stage = Some(rotations[&q]);
        r.flags.converged = rot_solution.converged;
    }
    timings.rotation_ms = t_rot.elapsed().as_secs_f64() * 1e3;

    // Edge residual bookkeeping (degrees, against the solved rotations).
    let owned_edges: Vec<RelativePoseMeasurement> = edges.iter().map(|&e| e.clone()).collect();
    for e in &owned_edges {
        let predicted = rotations[&e.edge.1] * rotations[&e.edge.0].inverse();
        let deg = e.rotation.angle_to(&predicted).to_degrees();
        for id in [e.edge.0, e.edge.1] {
            if let Some(r) = reports.get_mut(&id) {
                r.edge_residual_deg.push((e.edge, deg));
            }
        }
    }

    // ---- Translation averaging ----
    let t_trans = Instant::now();
    let gate_rad = config.gate_deg.to_radians();
    let kept = match gate_edges(&owned_edges, &rotations, gate_rad) {
        Ok(k) => k,
        Err(TransAvgError::AllEdgesRejected) => {
            for r in reports.values_mut() {
                r.flags.scale_unobservable = true;
            }
            return (reports.into_iter().collect(), timings);
        }
        Err(_) => unreachable!(),
    };
    let mut gated: Vec<RelativePoseMeasurement> =
        kept.iter().map(|&i| owned_edges[i].clone()).collect();
    for e in &gated {
        for id in [e.edge.0, e.edge.1] {
            if let Some(r) = reports.get_mut(&id) {
                r.gated_edges.push(e.edge);
            }
        }
    }

    // Optional per-edge translation refinement with the solved rotations.
    if config.refine_translations {
        for e in &mut gated {
            let r_ab = rotations[&e.edge.1] * rotations[&e.edge.0].inverse();
            let kind = e.edge_kind;
            let pair = match kind {
                EdgeKind::DatabaseQuery => (e.edge.1, e.edge.0),
                _ => e.edge,
            };
            let (corrs, _) = pair_correspondences(problem, pair, kind);
            let inliers: Vec<Correspondence> = e.inliers.iter().map(|&i| corrs[i]).collect();
            if let Ok(d) = refine_relative_translation(&e.direction, &r_ab, &inliers) {
                e.direction = d;
            }
        }
    }

    // Build the translation problem. The unknown of a rig group is the rig
    // node; database anchors are shifted by the member offsets.
    let cap = config.inlier_cap.max(1) as f64;
    let fixed_centers: BTreeMap<ImageId, Vector3<f64>> =
        problem.database.iter().map(|(&id, (p, _))| (id, p.camera_center())).collect();
    let rig_rotation = rig.as_ref().map(|ctx| {
        let rot = rot_solution.rotations[&ctx.node];
        rot
    });
    let mut trans_edges: Vec<TransEdge> = Vec::new();
    for e in &gated {
        let weight = (e.num_inliers as f64).min(cap) / cap;
        let dir = world_direction(e, &rotations[&e.edge.1]);
        match e.edge_kind {
            EdgeKind::DatabaseQuery => {
                let mut anchor = fixed_centers[&e.edge.0];
                let mut target = e.edge.1;
                if let (Some(ctx), Some(rr)) = (&rig, &rig_rotation) {
                    let offset = ctx.members[&e.edge.1].camera_center();
                    anchor -= rr.inverse().rotate(&offset);
                    target = ctx.node;
                }
                trans_edges.push(TransEdge {
                    source: EdgeSource::Fixed(anchor),
                    target,
                    direction: dir,
                    weight,
                    pair: e.edge,
                });
            }
            EdgeKind::QueryQuery => {
                trans_edges.push(TransEdge {
                    source: EdgeSource::Unknown(e.edge.0),
                    target: e.edge.1,
                    direction: dir,
                    weight,
                    pair: e.edge,
                });
            }
            EdgeKind::RigFixed => {}
        }
    }
    let unknown_ids: Vec<ImageId> = match &rig {
        Some(ctx) => vec![ctx.node],
        None => group.to_vec(),
    };
    // Queries without enough edges are unobservable; drop them and solve
    // the rest.
    let mut observable = unknown_ids.clone();
    loop {
        let mut counts: BTreeMap<ImageId, usize> = observable.iter().map(|&q| (q, 0)).collect();
        for e in &trans_edges {
            if let Some(c) = counts.get_mut(&e.target) {
                *c += 1;
            }
            if let EdgeSource::Unknown(from) = e.source {
                if let Some(c) = counts.get_mut(&from) {
                    *c += 1;
                }
            }
        }
        let starved: Vec<ImageId> =
            counts.iter().filter(|(_, &c)| c < 2).map(|(&q, _)| q).collect();
        if starved.is_empty() {
            break;
        }
        for q in starved {
            observable.retain(|&x| x != q);
            trans_edges.retain(|e| e.target != q && e.source != EdgeSource::Unknown(q));
            match &rig {
                Some(ctx) => {
                    for (&m, _) in &ctx.members {
                        if let Some(r) = reports.get_mut(&m) {
                            r.flags.scale_unobservable = true;
                        }
                    }
                }
                None => {
                    if let Some(r) = reports.get_mut(&q) {
                        r.flags.scale_unobservable = true;
                    }
                }
            }
        }
    }
    if observable.is_empty() {
        return (reports.into_iter().collect(), timings);
    }

    let trans_problem =
        TranslationProblem::new(fixed_centers.clone(), observable.clone(), trans_edges);

    // Initialize centers by ray intersection, propagating through solved
    // neighbors; parallel-ray systems fall back to the min-norm point.
    let mut init_centers: BTreeMap<ImageId, Vector3<f64>> = BTreeMap::new();
    let mut degenerate: Vec<ImageId> = Vec::new();
    loop {
        let mut progressed = false;
        for &u in &observable {
            if init_centers.contains_key(&u) {
                continue;
            }
            let mut rays: Vec<Ray> = Vec::new();
            for e in trans_problem.edges() {
                if e.target == u {
                    match e.source {
                        EdgeSource::Fixed(c) => {
                            rays.push(Ray { origin: c, direction: e.direction })
                        }
                        EdgeSource::Unknown(from) => {
                            if let Some(&c) = init_centers.get(&from) {
                                rays.push(Ray { origin: c, direction: e.direction });
                            }
                        }
                    }
                } else if e.source == EdgeSource::Unknown(u) {
                    if let Some(&c) = init_centers.get(&e.target) {
                        rays.push(Ray { origin: c, direction: -e.direction });
                    }
                }
            }
            if rays.len() < 2 {
                continue;
            }
            match initialize_center(&rays) {
                Ok(c) => {
                    init_centers.insert(u, c);
                    progressed = true;
                }
                Err(TransAvgError::DegenerateGeometry) => {
                    init_centers.insert(u, initialize_center_min_norm(&rays));
                    degenerate.push(u);
                    progressed = true;
                }
                Err(_) => {}
            }
        }
        if !progressed {
            break;
        }
    }
    for &u in &observable {
        init_centers.entry(u).or_insert_with(|| {
            degenerate.push(u);
            Vector3::zeros()
        });
    }
    let mark_degenerate = |reports: &mut BTreeMap<ImageId, QueryReport>, u: ImageId| match &rig {
        Some(ctx) => {
            for &m in ctx.members.keys() {
                if let Some(r) = reports.get_mut(&m) {
                    r.flags.degenerate_geometry = true;
                }
            }
        }
        None => {
            if let Some(r) = reports.get_mut(&u) {
                r.flags.degenerate_geometry = true;
            }
        }
    };
    for &u in &degenerate {
        mark_degenerate(&mut reports, u);
    }

    let mut trans_opts = config.translation.clone();
    trans_opts.objective = config.trans_objective;
    let centers = match solve_centers(&trans_problem, &init_centers, &trans_opts) {
        Ok(sol) => sol.centers,
        Err(_) => init_centers,
    };

    // Stage poses for every member of the group.
    let mut stage_poses: BTreeMap<ImageId, Pose> = BTreeMap::new();
    let mut rig_pose_init: Option<Pose> = None;
    match &rig {
        Some(ctx) => {
            if let Some(&c) = centers.get(&ctx.node) {
                let rig_pose = Pose::from_rotation_center(rot_solution.rotations[&ctx.node], &c);
                for (&m, rel) in &ctx.members {
                    stage_poses.insert(m, compose_member(&rig_pose, rel));
                }
                rig_pose_init = Some(rig_pose);
            }
        }
        None => {
            for (&q, &c) in &centers {
                stage_poses.insert(q, Pose::from_rotation_center(rotations[&q], &c));
            }
        }
    }
    for (&q, r) in reports.iter_mut() {
        if let Some(p) = stage_poses.get(&q) {
            r.transavg_pose = Some(*p);
        }
    }
    timings.translation_ms = t_trans.elapsed().as_secs_f64() * 1e3;

    // ---- Post optimization ----
    let t_post = Instant::now();
    let solvable: Vec<ImageId> =
        group.iter().copied().filter(|q| stage_poses.contains_key(q)).collect();
    let any_degenerate = !degenerate.is_empty();
    if !solvable.is_empty() {
        let finals = run_post_stage(
            problem,
            config,
            &rig,
            rig_pose_init,
            any_degenerate,
            &gated,
            &rotations,
            &stage_poses,
            &solvable,
            &mut reports,
        );
        for (q, pose) in finals {
            if let Some(r) = reports.get_mut(&q) {
                r.final_pose = Some(pose);
            }
        }
    }
    // Fatal flags never publish a fabricated pose.
    for r in reports.values_mut() {
        if r.flags.fatal() {
            r.final_pose = None;
        }
    }
    timings.post_ms = t_post.elapsed().as_secs_f64() * 1e3;

    (reports.into_iter().collect(), timings)
}

#[allow(clippy::too_many_arguments)]
fn run_post_stage(
    problem: &LocalizationProblem,
    config: &SolverConfig,
    rig: &Option<RigContext>,
    rig_pose_init: Option<Pose>,
    degenerate_geometry: bool,
    gated: &[RelativePoseMeasurement],
    rotations: &BTreeMap<ImageId, Rotation3>,
    stage_poses: &BTreeMap<ImageId, Pose>,
    solvable: &[ImageId],
    reports: &mut BTreeMap<ImageId, QueryReport>,
) -> Vec<(ImageId, Pose)> {
    let passthrough: Vec<(ImageId, Pose)> =
        solvable.iter().map(|&q| (q, stage_poses[&q])).collect();
    match config.post_mode {
        PostMode::None => passthrough,
        PostMode::LocalOpt => {
            let mut out = Vec::new();
            for &q in solvable {
                let lo_edges: Vec<LocalOptEdge> = gated
                    .iter()
                    .filter(|e| e.edge_kind == EdgeKind::DatabaseQuery && e.edge.1 == q)
                    .map(|e| LocalOptEdge {
                        proposal: e.rotation * rotations[&e.edge.0],
                        anchor: problem.database[&e.edge.0].0.camera_center(),
                        direction_cam: e.direction,
                    })
                    .collect();
                if lo_edges.is_empty() {
                    out.push((q, stage_poses[&q]));
                    continue;
                }
                let (rot, center) = local_opt_refine(&lo_edges);
                out.push((q, Pose::from_rotation_center(rot, &center)));
            }
            out
        }
        PostMode::Sampson => {
            let mut init: BTreeMap<ImageId, Pose> = BTreeMap::new();
            for &q in solvable {
                init.insert(q, stage_poses[&q]);
            }
            let mut s_edges = Vec::new();
            for e in gated {
                let pair = match e.edge_kind {
                    EdgeKind::DatabaseQuery => (e.edge.1, e.edge.0),
                    _ => e.edge,
                };
                let (corrs, _) = pair_correspondences(problem, pair, e.edge_kind);
                let inliers: Vec<Correspondence> =
                    e.inliers.iter().map(|&i| corrs[i]).collect();
                if inliers.is_empty() {
                    continue;
                }
                let a_fixed = problem.database.get(&e.edge.0).map(|(p, _)| *p);
                if a_fixed.is_none() && !init.contains_key(&e.edge.0) {
                    continue;
                }
                if !init.contains_key(&e.edge.1) && !problem.database.contains_key(&e.edge.1) {
                    continue;
                }
                s_edges.push(SampsonEdge {
                    a: e.edge.0,
                    b: e.edge.1,
                    a_fixed,
                    b_fixed: None,
                    weight: (e.num_inliers as f64).min(config.inlier_cap as f64)
                        / config.inlier_cap as f64,
                    corrs: inliers,
                });
            }
            match sampson_refine(&init, &s_edges, config.joint.max_iters) {
                Ok(res) => {
                    if res.rank_deficient {
                        for &q in solvable {
                            if let Some(r) = reports.get_mut(&q) {
                                r.flags.rank_deficient = true;
                            }
                        }
                    }
                    for &q in solvable {
                        if let Some(r) = reports.get_mut(&q) {
                            r.flags.converged &= res.converged;
                        }
                    }
                    res.poses.into_iter().collect()
                }
                Err(_) => passthrough,
            }
        }
        PostMode::Full => {
            // Inlier keypoint matches per gated edge, oriented (a, b).
            // Retrieval match rows are stored (kpt_query, kpt_database).
            let owned: Vec<OwnedBuildEdge> = gated
                .iter()
                .filter(|e| e.edge_kind != EdgeKind::RigFixed)
                .map(|e| {
                    let pair = match e.edge_kind {
                        EdgeKind::DatabaseQuery => (e.edge.1, e.edge.0),
                        _ => e.edge,
                    };
                    let rows = problem.matches.get(&pair).map(Vec::as_slice).unwrap_or(&[]);
                    let matches: Vec<(usize, usize)> = e
                        .inliers
                        .iter()
                        .map(|&i| {
                            let (k0, k1) = rows[i];
                            if e.edge_kind == EdgeKind::DatabaseQuery {
                                (k1, k0)
                            } else {
                                (k0, k1)
                            }
                        })
                        .collect();
                    OwnedBuildEdge {
                        pair: e.edge,
                        kind: e.edge_kind,
                        num_inliers: e.num_inliers,
                        matches,
                    }
                })
                .collect();
            let build_edges: Vec<TrackBuildEdge> = owned
                .iter()
                .map(|o| TrackBuildEdge {
                    pair: o.pair,
                    kind: o.kind,
                    num_inliers: o.num_inliers,
                    matches: &o.matches,
                })
                .collect();
            let tracks = build_tracks(&problem.keypoints, &build_edges);
            let views = ViewTable {
                database: problem.database.clone(),
                query_intrinsics: problem.queries.clone(),
            };
            let tri_opts = TriangulationOptions {
                min_tri_angle_deg: config.joint.triangulation.min_tri_angle_deg,
                max_reproj_px: config.joint.triangulation.max_reproj_px,
                use_query_estimate: config.joint.triangulation.use_query_estimate
                    && !degenerate_geometry,
            };
            let triangulated: Vec<_> = tracks
                .iter()
                .map(|t| triangulate_track(t, &views, stage_poses, &tri_opts))
                .collect();
            for t in &triangulated {
                for o in &t.query_observations {
                    if let Some(r) = reports.get_mut(&o.image) {
                        r.n_tracks += 1;
                        if t.status == TrackStatus::Triangulated {
                            r.n_tracks_triangulated += 1;
                        }
                    }
                }
            }
            let unknowns = match (rig, rig_pose_init) {
                (Some(ctx), Some(initial)) => {
                    PoseUnknowns::Rig { initial, members: ctx.members.clone() }
                }
                _ => {
                    let mut poses = BTreeMap::new();
                    for &q in solvable {
                        poses.insert(q, stage_poses[&q]);
                    }
                    PoseUnknowns::PerQuery(poses)
                }
            };
            match joint_refine(&views, &unknowns, &triangulated, &config.joint) {
                Ok(res) => {
                    for &q in solvable {
                        if let Some(r) = reports.get_mut(&q) {
                            r.flags.converged &= res.converged;
                        }
                    }
                    solvable
                        .iter()
                        .filter_map(|&q| res.poses.get(&q).map(|p| (q, *p)))
                        .collect()
                }
                Err(_) => {
                    for &q in solvable {
                        if let Some(r) = reports.get_mut(&q) {
                            r.flags.no_tracks = true;
                        }
                    }
                    passthrough
                }
            }
        }
    }
}

struct OwnedBuildEdge {
    pair: (ImageId, ImageId),
    kind: EdgeKind,
    num_inliers: usize,
    matches: Vec<(usize, usize)>,
}
