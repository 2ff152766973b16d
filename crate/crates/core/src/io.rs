//! Text file formats for problems and reports.
//!
//! A problem bundle is a directory:
//!
//! ```text
//! database_poses.txt        # <id> qw qx qy qz tx ty tz
//! database_intrinsics.txt   # <id> fx fy cx cy
//! query_intrinsics.txt      # <id> fx fy cx cy
//! pairs.txt                 # <query_id> <database_id>
//! query_query_pairs.txt     # optional: <query_id> <query_id>
//! rig.txt                   # optional: <query_id> qw qx qy qz tx ty tz
//! keypoints/<id>.txt        # x y   (one keypoint per line)
//! matches/<A>__<B>.txt      # header "<A> <B> <n>", then n lines "kptA kptB"
//! ```
//!
//! Files are UTF-8, space separated; `#` starts a comment. Floats are
//! written with 17 significant digits so save -> load -> save is
//! byte-identical. Match rows of retrieval pairs are (kpt_query,
//! kpt_database), matching the pair order in `pairs.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Pose, Rotation3};
use crate::metrics;
use crate::pipeline::{LocalizationProblem, QueryFlags, QueryReport, SolveReport};
use crate::ImageId;

#[derive(Debug, Error)]
pub enum IoFormatError {
    #[error("{file}:{line}: {reason}")]
    ParseError { file: PathBuf, line: usize, reason: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: reference to unknown image id {id}")]
    DanglingReference { file: PathBuf, id: ImageId },
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// 17-significant-digit float formatting (exact f64 round trip).
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(tok: &str, file: &Path, line: usize) -> Result<f64, IoFormatError> {
    let v: f64 = tok.parse().map_err(|_| IoFormatError::ParseError {
        file: file.to_path_buf(),
        line,
        reason: format!("invalid number `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(IoFormatError::ParseError {
            file: file.to_path_buf(),
            line,
            reason: format!("non-finite number `{tok}`"),
        });
    }
    Ok(v)
}

fn parse_id(tok: &str, file: &Path, line: usize) -> Result<ImageId, IoFormatError> {
    tok.parse().map_err(|_| IoFormatError::ParseError {
        file: file.to_path_buf(),
        line,
        reason: format!("invalid image id `{tok}`"),
    })
}

/// Content lines with their 1-based line numbers; comments and blanks
/// skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let trimmed = l.split('#').next().unwrap_or("").trim();
        if trimmed.is_empty() {
            None
        } else {
            Some((i + 1, trimmed))
        }
    })
}

fn read_file(path: &Path) -> Result<String, IoFormatError> {
    if !path.is_file() {
        return Err(IoFormatError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn pose_line(id: ImageId, pose: &Pose) -> String {
    let q = pose.rotation.wxyz();
    let t = pose.translation;
    format!(
        "{id} {} {} {} {} {} {} {}",
        fmt_f64(q[0]),
        fmt_f64(q[1]),
        fmt_f64(q[2]),
        fmt_f64(q[3]),
        fmt_f64(t.x),
        fmt_f64(t.y),
        fmt_f64(t.z)
    )
}

fn parse_pose_line(
    tokens: &[&str],
    file: &Path,
    line: usize,
) -> Result<(ImageId, Pose), IoFormatError> {
    if tokens.len() != 8 {
        return Err(IoFormatError::ParseError {
            file: file.to_path_buf(),
            line,
            reason: format!("expected 8 fields, got {}", tokens.len()),
        });
    }
    let id = parse_id(tokens[0], file, line)?;
    let mut v = [0.0; 7];
    for (k, tok) in tokens[1..].iter().enumerate() {
        v[k] = parse_f64(tok, file, line)?;
    }
    let rotation = Rotation3::from_quaternion(v[0], v[1], v[2], v[3]);
    Ok((id, Pose::new(rotation, Vector3::new(v[4], v[5], v[6]))))
}

/// Writes a pose table (`<id> qw qx qy qz tx ty tz` per line).
pub fn save_poses(path: &Path, poses: &BTreeMap<ImageId, Pose>) -> Result<(), IoFormatError> {
    let mut out = String::new();
    for (id, pose) in poses {
        writeln!(out, "{}", pose_line(*id, pose)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a pose table.
pub fn load_poses(path: &Path) -> Result<BTreeMap<ImageId, Pose>, IoFormatError> {
    let text = read_file(path)?;
    let mut out = BTreeMap::new();
    for (line, content) in content_lines(&text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let (id, pose) = parse_pose_line(&tokens, path, line)?;
        out.insert(id, pose);
    }
    Ok(out)
}

fn save_intrinsics(
    path: &Path,
    table: &BTreeMap<ImageId, CameraIntrinsics>,
) -> Result<(), IoFormatError> {
    let mut out = String::new();
    for (id, k) in table {
        writeln!(
            out,
            "{id} {} {} {} {}",
            fmt_f64(k.fx),
            fmt_f64(k.fy),
            fmt_f64(k.cx),
            fmt_f64(k.cy)
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_intrinsics(path: &Path) -> Result<BTreeMap<ImageId, CameraIntrinsics>, IoFormatError> {
    let text = read_file(path)?;
    let mut out = BTreeMap::new();
    for (line, content) in content_lines(&text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(IoFormatError::ParseError {
                file: path.to_path_buf(),
                line,
                reason: format!("expected 5 fields, got {}", tokens.len()),
            });
        }
        let id = parse_id(tokens[0], path, line)?;
        let fx = parse_f64(tokens[1], path, line)?;
        let fy = parse_f64(tokens[2], path, line)?;
        let cx = parse_f64(tokens[3], path, line)?;
        let cy = parse_f64(tokens[4], path, line)?;
        if fx <= 0.0 || fy <= 0.0 {
            return Err(IoFormatError::ParseError {
                file: path.to_path_buf(),
                line,
                reason: "focal lengths must be positive".into(),
            });
        }
        out.insert(id, CameraIntrinsics::new(fx, fy, cx, cy));
    }
    Ok(out)
}

/// Saves a problem bundle; same problem always produces byte-identical
/// files.
pub fn save_problem(problem: &LocalizationProblem, dir: &Path) -> Result<(), IoFormatError> {
    fs::create_dir_all(dir.join("keypoints"))?;
    fs::create_dir_all(dir.join("matches"))?;

    let poses: BTreeMap<ImageId, Pose> =
        problem.database.iter().map(|(&id, (p, _))| (id, *p)).collect();
    save_poses(&dir.join("database_poses.txt"), &poses)?;
    let db_k: BTreeMap<ImageId, CameraIntrinsics> =
        problem.database.iter().map(|(&id, (_, k))| (id, *k)).collect();
    save_intrinsics(&dir.join("database_intrinsics.txt"), &db_k)?;
    save_intrinsics(&dir.join("query_intrinsics.txt"), &problem.queries)?;

    let mut pairs = String::new();
    for (q, d) in &problem.retrieval_pairs {
        writeln!(pairs, "{q} {d}").unwrap();
    }
    fs::write(dir.join("pairs.txt"), pairs)?;

    if problem.query_query_pairs.is_empty() {
        let _ = fs::remove_file(dir.join("query_query_pairs.txt"));
    } else {
        let mut qq = String::new();
        for (a, b) in &problem.query_query_pairs {
            writeln!(qq, "{a} {b}").unwrap();
        }
        fs::write(dir.join("query_query_pairs.txt"), qq)?;
    }

    match &problem.rig {
        Some(rig) => save_poses(&dir.join("rig.txt"), rig)?,
        None => {
            let _ = fs::remove_file(dir.join("rig.txt"));
        }
    }

    for (id, kps) in &problem.keypoints {
        let mut out = String::new();
        for p in kps {
            writeln!(out, "{} {}", fmt_f64(p[0]), fmt_f64(p[1])).unwrap();
        }
        fs::write(dir.join("keypoints").join(format!("{id}.txt")), out)?;
    }
    for (&(a, b), rows) in &problem.matches {
        let mut out = String::new();
        writeln!(out, "{a} {b} {}", rows.len()).unwrap();
        for (ka, kb) in rows {
            writeln!(out, "{ka} {kb}").unwrap();
        }
        fs::write(dir.join("matches").join(format!("{a}__{b}.txt")), out)?;
    }
    Ok(())
}

/// Loads and fully validates a problem bundle.
pub fn load_problem(dir: &Path) -> Result<LocalizationProblem, IoFormatError> {
    if !dir.is_dir() {
        return Err(IoFormatError::MissingFile(dir.to_path_buf()));
    }
    let db_poses = load_poses(&dir.join("database_poses.txt"))?;
    let db_intr = load_intrinsics(&dir.join("database_intrinsics.txt"))?;
    let q_intr = load_intrinsics(&dir.join("query_intrinsics.txt"))?;

    let mut database = BTreeMap::new();
    for (&id, pose) in &db_poses {
        let k = db_intr.get(&id).ok_or_else(|| IoFormatError::DanglingReference {
            file: dir.join("database_intrinsics.txt"),
            id,
        })?;
        database.insert(id, (*pose, *k));
    }
    for &id in db_intr.keys() {
        if !db_poses.contains_key(&id) {
            return Err(IoFormatError::DanglingReference {
                file: dir.join("database_poses.txt"),
                id,
            });
        }
    }

    let pairs_path = dir.join("pairs.txt");
    let text = read_file(&pairs_path)?;
    let mut retrieval_pairs = Vec::new();
    for (line, content) in content_lines(&text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(IoFormatError::ParseError {
                file: pairs_path.clone(),
                line,
                reason: format!("expected 2 fields, got {}", tokens.len()),
            });
        }
        let q = parse_id(tokens[0], &pairs_path, line)?;
        let d = parse_id(tokens[1], &pairs_path, line)?;
        if !q_intr.contains_key(&q) {
            return Err(IoFormatError::DanglingReference { file: pairs_path.clone(), id: q });
        }
        if !database.contains_key(&d) {
            return Err(IoFormatError::DanglingReference { file: pairs_path.clone(), id: d });
        }
        retrieval_pairs.push((q, d));
    }

    let qq_path = dir.join("query_query_pairs.txt");
    let mut query_query_pairs = Vec::new();
    if qq_path.is_file() {
        let text = read_file(&qq_path)?;
        for (line, content) in content_lines(&text) {
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() != 2 {
                return Err(IoFormatError::ParseError {
                    file: qq_path.clone(),
                    line,
                    reason: format!("expected 2 fields, got {}", tokens.len()),
                });
            }
            let a = parse_id(tokens[0], &qq_path, line)?;
            let b = parse_id(tokens[1], &qq_path, line)?;
            for id in [a, b] {
                if !q_intr.contains_key(&id) {
                    return Err(IoFormatError::DanglingReference { file: qq_path.clone(), id });
                }
            }
            query_query_pairs.push((a, b));
        }
    }

    let rig_path = dir.join("rig.txt");
    let rig = if rig_path.is_file() {
        let poses = load_poses(&rig_path)?;
        for id in poses.keys() {
            if !q_intr.contains_key(id) {
                return Err(IoFormatError::DanglingReference { file: rig_path.clone(), id: *id });
            }
        }
        Some(poses)
    } else {
        None
    };

    // Load every keypoint table present; images named by a pair must have
    // one.
    let mut keypoints = BTreeMap::new();
    let kp_dir = dir.join("keypoints");
    let mut present: Vec<ImageId> = Vec::new();
    if kp_dir.is_dir() {
        for entry in fs::read_dir(&kp_dir)? {
            let p = entry?.path();
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if p.extension().and_then(|s| s.to_str()) == Some("txt") {
                if let Ok(id) = stem.parse::<ImageId>() {
                    present.push(id);
                }
            }
        }
    }
    present.sort_unstable();
    let mut want: Vec<ImageId> = retrieval_pairs
        .iter()
        .flat_map(|&(q, d)| [q, d])
        .chain(query_query_pairs.iter().flat_map(|&(a, b)| [a, b]))
        .collect();
    want.sort_unstable();
    want.dedup();
    for id in want {
        if !present.contains(&id) {
            return Err(IoFormatError::MissingFile(kp_dir.join(format!("{id}.txt"))));
        }
    }
    for id in present {
        let path = kp_dir.join(format!("{id}.txt"));
        let text = read_file(&path)?;
        let mut kps = Vec::new();
        for (line, content) in content_lines(&text) {
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() != 2 {
                return Err(IoFormatError::ParseError {
                    file: path.clone(),
                    line,
                    reason: format!("expected 2 fields, got {}", tokens.len()),
                });
            }
            kps.push([parse_f64(tokens[0], &path, line)?, parse_f64(tokens[1], &path, line)?]);
        }
        keypoints.insert(id, kps);
    }

    let mut matches = BTreeMap::new();
    let mut all_pairs: Vec<(ImageId, ImageId)> = retrieval_pairs.clone();
    all_pairs.extend(&query_query_pairs);
    for (a, b) in all_pairs {
        let path = dir.join("matches").join(format!("{a}__{b}.txt"));
        let text = read_file(&path)?;
        let mut lines = content_lines(&text);
        let (hline, header) = lines.next().ok_or_else(|| IoFormatError::ParseError {
            file: path.clone(),
            line: 1,
            reason: "empty matches file".into(),
        })?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(IoFormatError::ParseError {
                file: path.clone(),
                line: hline,
                reason: format!("header expects 3 fields, got {}", tokens.len()),
            });
        }
        let (ha, hb) = (parse_id(tokens[0], &path, hline)?, parse_id(tokens[1], &path, hline)?);
        if (ha, hb) != (a, b) {
            return Err(IoFormatError::ParseError {
                file: path.clone(),
                line: hline,
                reason: format!("header pair ({ha}, {hb}) does not match file name"),
            });
        }
        let n: usize = tokens[2].parse().map_err(|_| IoFormatError::ParseError {
            file: path.clone(),
            line: hline,
            reason: format!("invalid count `{}`", tokens[2]),
        })?;
        let mut rows = Vec::with_capacity(n);
        for (line, content) in lines {
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if tokens.len() != 2 {
                return Err(IoFormatError::ParseError {
                    file: path.clone(),
                    line,
                    reason: format!("expected 2 fields, got {}", tokens.len()),
                });
            }
            let ka: usize = tokens[0].parse().map_err(|_| IoFormatError::ParseError {
                file: path.clone(),
                line,
                reason: format!("invalid index `{}`", tokens[0]),
            })?;
            let kb: usize = tokens[1].parse().map_err(|_| IoFormatError::ParseError {
                file: path.clone(),
                line,
                reason: format!("invalid index `{}`", tokens[1]),
            })?;
            for (id, idx) in [(a, ka), (b, kb)] {
                if idx >= keypoints[&id].len() {
                    return Err(IoFormatError::ParseError {
                        file: path.clone(),
                        line,
                        reason: format!("keypoint index {idx} out of range for image {id}"),
                    });
                }
            }
            rows.push((ka, kb));
        }
        if rows.len() != n {
            return Err(IoFormatError::ParseError {
                file: path.clone(),
                line: hline,
                reason: format!("header count {n} but {} rows", rows.len()),
            });
        }
        matches.insert((a, b), rows);
    }

    Ok(LocalizationProblem {
        database,
        queries: q_intr,
        retrieval_pairs,
        query_query_pairs,
        rig,
        keypoints,
        matches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    TextTable,
}

const CSV_HEADER: &str = "query,converged,scale_unobservable,degenerate_geometry,no_tracks,disconnected,rank_deficient,n_edges,n_gated,n_tracks,n_tracks_triangulated,qw,qx,qy,qz,tx,ty,tz,rotavg_err_deg,transavg_err_deg,transavg_err_pos,final_err_deg,final_err_pos";

fn flag_bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes a solve report. CSV columns are stable and documented by
/// `CSV_HEADER`; per-stage errors are filled when ground truth is given
/// (computed with the metrics module).
pub fn save_report(
    report: &SolveReport,
    path: &Path,
    format: ReportFormat,
    ground_truth: Option<&BTreeMap<ImageId, Pose>>,
) -> Result<(), IoFormatError> {
    let mut rows: Vec<String> = Vec::new();
    for (id, q) in &report.queries {
        let truth = ground_truth.and_then(|gt| gt.get(id));
        let errs = |pose: Option<&Pose>| -> (String, String) {
            match (pose, truth) {
                (Some(p), Some(t)) => (
                    fmt_f64(metrics::rotation_error_deg(&p.rotation, &t.rotation)),
                    fmt_f64(metrics::position_error(p, t)),
                ),
                _ => (String::new(), String::new()),
            }
        };
        let rot_err = match (q.rotation_stage.as_ref(), truth) {
            (Some(r), Some(t)) => fmt_f64(metrics::rotation_error_deg(r, &t.rotation)),
            _ => String::new(),
        };
        let (ta_rot, ta_pos) = errs(q.transavg_pose.as_ref());
        let (f_rot, f_pos) = errs(q.final_pose.as_ref());
        let pose_cols = match &q.final_pose {
            Some(p) => {
                let qt = p.rotation.wxyz();
                format!(
                    "{},{},{},{},{},{},{}",
                    fmt_f64(qt[0]),
                    fmt_f64(qt[1]),
                    fmt_f64(qt[2]),
                    fmt_f64(qt[3]),
                    fmt_f64(p.translation.x),
                    fmt_f64(p.translation.y),
                    fmt_f64(p.translation.z)
                )
            }
            None => ",,,,,,".to_string(),
        };
        rows.push(format!(
            "{id},{},{},{},{},{},{},{},{},{},{},{pose_cols},{rot_err},{ta_rot},{ta_pos},{f_rot},{f_pos}",
            flag_bit(q.flags.converged),
            flag_bit(q.flags.scale_unobservable),
            flag_bit(q.flags.degenerate_geometry),
            flag_bit(q.flags.no_tracks),
            flag_bit(q.flags.disconnected),
            flag_bit(q.flags.rank_deficient),
            q.n_edges_estimated,
            q.gated_edges.len(),
            q.n_tracks,
            q.n_tracks_triangulated,
        ));
    }

    let text = match format {
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in rows {
                out.push_str(&r);
                out.push('\n');
            }
            out
        }
        ReportFormat::TextTable => {
            let mut out = String::new();
            writeln!(out, "{:>8} {:>6} {:>7} {:>24}  flags", "query", "edges", "tracks", "pose (qw qx qy qz | t)")
                .unwrap();
            for (id, q) in &report.queries {
                let pose = match &q.final_pose {
                    Some(p) => {
                        let qt = p.rotation.wxyz();
                        format!(
                            "{:+.5} {:+.5} {:+.5} {:+.5} | {:+.4} {:+.4} {:+.4}",
                            qt[0], qt[1], qt[2], qt[3],
                            p.translation.x, p.translation.y, p.translation.z
                        )
                    }
                    None => "(no pose)".to_string(),
                };
                let mut flags = Vec::new();
                if q.flags.scale_unobservable {
                    flags.push("scale_unobservable");
                }
                if q.flags.degenerate_geometry {
                    flags.push("degenerate_geometry");
                }
                if q.flags.no_tracks {
                    flags.push("no_tracks");
                }
                if q.flags.disconnected {
                    flags.push("disconnected");
                }
                if q.flags.rank_deficient {
                    flags.push("rank_deficient");
                }
                if !q.flags.converged {
                    flags.push("not_converged");
                }
                writeln!(
                    out,
                    "{:>8} {:>6} {:>7} {}  {}",
                    id,
                    q.n_edges_estimated,
                    q.n_tracks_triangulated,
                    pose,
                    flags.join(",")
                )
                .unwrap();
            }
            out
        }
    };
    fs::write(path, text)?;
    Ok(())
}

/// One row of a loaded CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub query: ImageId,
    pub flags: QueryFlags,
    pub n_edges: usize,
    pub n_gated: usize,
    pub n_tracks: usize,
    pub n_tracks_triangulated: usize,
    pub final_pose: Option<Pose>,
    pub final_err_deg: Option<f64>,
    pub final_err_pos: Option<f64>,
}

/// Loads a CSV report for regression comparison and evaluation.
pub fn load_report(path: &Path) -> Result<Vec<ReportRow>, IoFormatError> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (line, content) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line == 1 {
            if content.trim() != CSV_HEADER {
                return Err(IoFormatError::ParseError {
                    file: path.to_path_buf(),
                    line,
                    reason: "unexpected CSV header".into(),
                });
            }
            continue;
        }
        if content.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = content.split(',').collect();
        if f.len() != 23 {
            return Err(IoFormatError::ParseError {
                file: path.to_path_buf(),
                line,
                reason: format!("expected 23 columns, got {}", f.len()),
            });
        }
        let query = parse_id(f[0], path, line)?;
        let bit = |tok: &str| tok == "1";
        let flags = QueryFlags {
            converged: bit(f[1]),
            scale_unobservable: bit(f[2]),
            degenerate_geometry: bit(f[3]),
            no_tracks: bit(f[4]),
            disconnected: bit(f[5]),
            rank_deficient: bit(f[6]),
        };
        let usize_col = |tok: &str| -> Result<usize, IoFormatError> {
            tok.parse().map_err(|_| IoFormatError::ParseError {
                file: path.to_path_buf(),
                line,
                reason: format!("invalid count `{tok}`"),
            })
        };
        let final_pose = if f[11].is_empty() {
            None
        } else {
            let mut v = [0.0; 7];
            for (k, tok) in f[11..18].iter().enumerate() {
                v[k] = parse_f64(tok, path, line)?;
            }
            Some(Pose::new(
                Rotation3::from_quaternion(v[0], v[1], v[2], v[3]),
                Vector3::new(v[4], v[5], v[6]),
            ))
        };
        let opt_f64 = |tok: &str| -> Result<Option<f64>, IoFormatError> {
            if tok.is_empty() {
                Ok(None)
            } else {
                parse_f64(tok, path, line).map(Some)
            }
        };
        rows.push(ReportRow {
            query,
            flags,
            n_edges: usize_col(f[7])?,
            n_gated: usize_col(f[8])?,
            n_tracks: usize_col(f[9])?,
            n_tracks_triangulated: usize_col(f[10])?,
            final_pose,
            final_err_deg: opt_f64(f[21])?,
            final_err_pos: opt_f64(f[22])?,
        });
    }
    Ok(rows)
}

/// Convenience accessor matching `load_report` rows against a report.
pub fn report_rows(report: &SolveReport) -> Vec<(ImageId, &QueryReport)> {
    report.queries.iter().map(|(&id, q)| (id, q)).collect()
}
