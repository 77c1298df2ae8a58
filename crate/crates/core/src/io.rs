//! Text file formats exchanged between pipeline stages.
//!
//! * TUM trajectories: `timestamp tx ty tz qx qy qz qw`, one pose per line.
//! * g2o graphs: `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` with the 21
//!   upper-triangular information entries. The g2o quaternion error uses the
//!   vector part of the quaternion (≈ half the rotation angle), so rotational
//!   information is exported as `4 / σ²` and divided by 4 on import.
//! * CSV tables (odometry, proposals, detections, rejection verdicts) with a
//!   header row.
//! * JSON lines of `{"frame_id", "vector"}` for observations and embeddings.
//!
//! Writers produce byte-identical output for identical inputs.

use std::collections::HashSet;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose6, RotMat, Transform};
use crate::loop_detection::Detection;
use crate::outlier_rejection::{LoopProposal, RejectionResult};
use crate::pose_graph::{FactorGraph, LoopFactor, OdomFactor};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

fn pose_to_tq(p: &Pose6) -> (Vector3<f64>, [f64; 4]) {
    (p.t, p.rotation().to_quaternion())
}

fn pose_from_tq(t: Vector3<f64>, q: [f64; 4]) -> Result<Pose6> {
    Ok(Pose6::from_transform(&Transform::new(RotMat::from_quaternion(q), t))?)
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| s.parse::<f64>().map_err(|e| parse_err(line, format!("bad number {s:?}: {e}"))))
        .collect()
}

/// TUM trajectory with timestamps `k · period`.
pub fn write_tum(poses: &[Pose6], period: f64) -> String {
    let mut s = String::new();
    for (k, p) in poses.iter().enumerate() {
        let (t, q) = pose_to_tq(p);
        s.push_str(&format!(
            "{:.6} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10}\n",
            k as f64 * period,
            t.x,
            t.y,
            t.z,
            q[0],
            q[1],
            q[2],
            q[3]
        ));
    }
    s
}

/// Parses a TUM trajectory, skipping blank lines and `#` comments.
pub fn read_tum(text: &str) -> Result<Vec<(f64, Pose6)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(n + 1, format!("expected 8 fields, got {}", fields.len())));
        }
        let v = parse_floats(&fields, n + 1)?;
        out.push((v[0], pose_from_tq(Vector3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])?));
    }
    Ok(out)
}

/// One odometry step: measured motion, per-axis variances and whether the
/// sensor flagged the step as degraded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomRow {
    pub i: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub var_z: f64,
    pub var_roll: f64,
    pub var_pitch: f64,
    pub var_yaw: f64,
    pub degraded: bool,
}

impl OdomRow {
    pub fn new(i: usize, meas: &Pose6, cov: &Vector6<f64>, degraded: bool) -> Self {
        OdomRow {
            i,
            x: meas.t.x,
            y: meas.t.y,
            z: meas.t.z,
            roll: meas.r.x,
            pitch: meas.r.y,
            yaw: meas.r.z,
            var_x: cov[0],
            var_y: cov[1],
            var_z: cov[2],
            var_roll: cov[3],
            var_pitch: cov[4],
            var_yaw: cov[5],
            degraded,
        }
    }

    pub fn meas(&self) -> Pose6 {
        Pose6::new(Vector3::new(self.x, self.y, self.z), Vector3::new(self.roll, self.pitch, self.yaw))
    }

    pub fn cov(&self) -> Vector6<f64> {
        Vector6::new(self.var_x, self.var_y, self.var_z, self.var_roll, self.var_pitch, self.var_yaw)
    }
}

/// A loop proposal row; `is_false` carries simulator ground truth when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub var_z: f64,
    pub var_roll: f64,
    pub var_pitch: f64,
    pub var_yaw: f64,
    pub score: f64,
    pub is_false: bool,
}

impl ProposalRow {
    pub fn new(p: &LoopProposal, is_false: bool) -> Self {
        let o = OdomRow::new(p.i, &p.rel, &p.cov, false);
        ProposalRow {
            i: p.i,
            j: p.j,
            x: o.x,
            y: o.y,
            z: o.z,
            roll: o.roll,
            pitch: o.pitch,
            yaw: o.yaw,
            var_x: o.var_x,
            var_y: o.var_y,
            var_z: o.var_z,
            var_roll: o.var_roll,
            var_pitch: o.var_pitch,
            var_yaw: o.var_yaw,
            score: p.score,
            is_false,
        }
    }

    pub fn proposal(&self) -> LoopProposal {
        let rel = Pose6::new(Vector3::new(self.x, self.y, self.z), Vector3::new(self.roll, self.pitch, self.yaw));
        let cov = Vector6::new(self.var_x, self.var_y, self.var_z, self.var_roll, self.var_pitch, self.var_yaw);
        LoopProposal::new(self.i, self.j, rel, cov, self.score)
    }
}

/// A rejection verdict row (`verdict` is `inlier` or `outlier`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub i: usize,
    pub j: usize,
    pub pass_rate: f64,
    pub verdict: String,
}

impl VerdictRow {
    pub fn is_inlier(&self) -> bool {
        self.verdict == "inlier"
    }
}

/// Serializes rows to CSV with a header derived from the field names.
pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Odometry as exchanged between stages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OdometryLog {
    pub meas: Vec<Pose6>,
    /// Per-axis variances.
    pub cov: Vec<Vector6<f64>>,
    pub degraded: Vec<bool>,
}

impl OdometryLog {
    pub fn len(&self) -> usize {
        self.meas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meas.is_empty()
    }

    /// Regressor input for step `k`: the measured motion plus the degradation flag.
    pub fn features(&self, k: usize) -> Vec<f64> {
        let mut f: Vec<f64> = self.meas[k].to_vector().iter().copied().collect();
        f.push(if self.degraded[k] { 1.0 } else { 0.0 });
        f
    }

    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<OdomRow> = (0..self.len())
            .map(|i| OdomRow::new(i, &self.meas[i], &self.cov[i], self.degraded[i]))
            .collect();
        write_csv(&rows)
    }

    /// Parses odometry rows; the `i` column must run 0, 1, 2, ...
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<OdomRow> = read_csv(text)?;
        for (k, r) in rows.iter().enumerate() {
            if r.i != k {
                return Err(parse_err(k + 2, format!("expected step {k}, found {}", r.i)));
            }
        }
        Ok(OdometryLog {
            meas: rows.iter().map(OdomRow::meas).collect(),
            cov: rows.iter().map(OdomRow::cov).collect(),
            degraded: rows.iter().map(|r| r.degraded).collect(),
        })
    }
}

pub fn write_proposals(proposals: &[LoopProposal], is_false: &[bool]) -> Result<String> {
    let rows: Vec<ProposalRow> = proposals
        .iter()
        .enumerate()
        .map(|(k, p)| ProposalRow::new(p, is_false.get(k).copied().unwrap_or(false)))
        .collect();
    write_csv(&rows)
}

pub fn read_proposals(text: &str) -> Result<(Vec<LoopProposal>, Vec<bool>)> {
    let rows: Vec<ProposalRow> = read_csv(text)?;
    Ok((rows.iter().map(ProposalRow::proposal).collect(), rows.iter().map(|r| r.is_false).collect()))
}

/// Detected loops as `i,j,score`.
pub fn write_detections(dets: &[Detection]) -> Result<String> {
    write_csv(dets)
}

pub fn read_detections(text: &str) -> Result<Vec<Detection>> {
    read_csv(text)
}

/// Verdicts as `i,j,pass_rate,verdict`, in proposal order.
pub fn write_verdicts(result: &RejectionResult, proposals: &[LoopProposal]) -> Result<String> {
    let rows: Vec<VerdictRow> = proposals
        .iter()
        .zip(&result.pass_rates)
        .zip(&result.is_inlier)
        .map(|((p, r), ok)| VerdictRow {
            i: p.i,
            j: p.j,
            pass_rate: *r,
            verdict: if *ok { "inlier" } else { "outlier" }.to_string(),
        })
        .collect();
    write_csv(&rows)
}

pub fn read_verdicts(text: &str) -> Result<Vec<VerdictRow>> {
    read_csv(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VectorRecord {
    frame_id: usize,
    vector: Vec<f64>,
}

/// One JSON object per line: `{"frame_id":k,"vector":[...]}`.
pub fn write_vectors_jsonl<V: AsRef<[f64]>>(vectors: &[V]) -> Result<String> {
    let mut s = String::new();
    for (k, v) in vectors.iter().enumerate() {
        s.push_str(&serde_json::to_string(&VectorRecord {
            frame_id: k,
            vector: v.as_ref().to_vec(),
        })?);
        s.push('\n');
    }
    Ok(s)
}

/// Reads vectors ordered by `frame_id`, which must cover `0..n` exactly once.
pub fn read_vectors_jsonl(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut recs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: VectorRecord = serde_json::from_str(line).map_err(|e| parse_err(n + 1, e.to_string()))?;
        recs.push(r);
    }
    recs.sort_by_key(|r| r.frame_id);
    for (k, r) in recs.iter().enumerate() {
        if r.frame_id != k {
            return Err(parse_err(0, format!("frame ids are not a permutation of 0..{}", recs.len())));
        }
    }
    Ok(recs.into_iter().map(|r| r.vector).collect())
}

fn information_entries(cov: &Vector6<f64>) -> [f64; 21] {
    let mut out = [0.0; 21];
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            if r == c {
                let rot = if r >= 3 { 4.0 } else { 1.0 };
                out[k] = rot / cov[r];
            }
            k += 1;
        }
    }
    out
}

/// g2o export of the graph (nodes at their current values, raw information
/// without the ϱ/ρ scale factors) followed by a `FIX` line for the anchor.
pub fn write_g2o(graph: &FactorGraph) -> String {
    let mut s = String::new();
    for (k, p) in graph.nodes.iter().enumerate() {
        let (t, q) = pose_to_tq(p);
        s.push_str(&format!(
            "VERTEX_SE3:QUAT {k} {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
    }
    let edge = |s: &mut String, i: usize, j: usize, meas: &Pose6, cov: &Vector6<f64>| {
        let (t, q) = pose_to_tq(meas);
        s.push_str(&format!(
            "EDGE_SE3:QUAT {i} {j} {} {} {} {} {} {} {}",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
        for v in information_entries(cov) {
            s.push_str(&format!(" {v}"));
        }
        s.push('\n');
    };
    for f in &graph.odometry {
        edge(&mut s, f.i, f.i + 1, &f.meas, &f.cov);
    }
    for f in &graph.loops {
        edge(&mut s, f.i, f.j, &f.meas, &f.cov);
    }
    s.push_str(&format!("FIX {}\n", graph.anchor));
    s
}

/// Parses a g2o graph. The first edge `(i, i+1)` for each `i` becomes an
/// odometry factor, every other edge a loop factor. Only diagonal information
/// is supported; off-diagonal entries must be zero.
pub fn read_g2o(text: &str) -> Result<FactorGraph> {
    let mut vertices: Vec<(usize, Pose6)> = Vec::new();
    let mut odometry = Vec::new();
    let mut loops = Vec::new();
    let mut anchor = 0;
    let mut seen_odom = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some(tag) = fields.first() else { continue };
        match *tag {
            "VERTEX_SE3:QUAT" => {
                if fields.len() != 9 {
                    return Err(parse_err(ln, "vertex needs id and 7 values"));
                }
                let id = fields[1].parse::<usize>().map_err(|e| parse_err(ln, e.to_string()))?;
                let v = parse_floats(&fields[2..], ln)?;
                vertices.push((id, pose_from_tq(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]])?));
            }
            "EDGE_SE3:QUAT" => {
                if fields.len() != 3 + 7 + 21 {
                    return Err(parse_err(ln, "edge needs 2 ids, 7 values and 21 information entries"));
                }
                let i = fields[1].parse::<usize>().map_err(|e| parse_err(ln, e.to_string()))?;
                let j = fields[2].parse::<usize>().map_err(|e| parse_err(ln, e.to_string()))?;
                let v = parse_floats(&fields[3..], ln)?;
                let meas = pose_from_tq(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]])?;
                let mut cov = Vector6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        let x = v[k];
                        if r == c {
                            let rot = if r >= 3 { 4.0 } else { 1.0 };
                            cov[r] = rot / x;
                        } else if x != 0.0 {
                            return Err(parse_err(ln, "non-diagonal information is not supported"));
                        }
                        k += 1;
                    }
                }
                if j == i + 1 && seen_odom.insert(i) {
                    odometry.push(OdomFactor { i, meas, cov });
                } else {
                    loops.push(LoopFactor { i, j, meas, cov });
                }
            }
            "FIX" => {
                anchor = fields
                    .get(1)
                    .ok_or_else(|| parse_err(ln, "FIX needs a vertex id"))?
                    .parse::<usize>()
                    .map_err(|e| parse_err(ln, e.to_string()))?;
            }
            other => return Err(parse_err(ln, format!("unsupported record {other:?}"))),
        }
    }
    vertices.sort_by_key(|(id, _)| *id);
    for (k, (id, _)) in vertices.iter().enumerate() {
        if *id != k {
            return Err(parse_err(0, format!("vertex ids must be 0..{} without gaps", vertices.len())));
        }
    }
    odometry.sort_by_key(|f: &OdomFactor| f.i);
    Ok(FactorGraph {
        nodes: vertices.into_iter().map(|(_, p)| p).collect(),
        odometry,
        loops,
        anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_graph::FactorGraph;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn pose(v: [f64; 6]) -> Pose6 {
        Pose6::from_vector(&Vector6::from_column_slice(&v))
    }

    fn close(a: &Pose6, b: &Pose6, tol: f64) -> bool {
        let d = a.to_transform().relative(&b.to_transform());
        d.t.norm() < tol && d.rot.angle() < tol
    }

    #[test]
    fn tum_roundtrip_within_print_precision() {
        let poses = vec![pose([1.0, -2.0, 0.5, 0.1, -0.2, 3.0]), Pose6::identity()];
        let text = write_tum(&poses, 0.2);
        assert!(text.starts_with("0.000000 1.0000000000 -2.0000000000 0.5000000000"));
        let back = read_tum(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_relative_eq!(back[1].0, 0.2);
        for ((_, b), a) in back.iter().zip(&poses) {
            assert!(close(a, b, 1e-9));
        }
    }

    #[test]
    fn tum_rejects_short_lines() {
        assert!(matches!(read_tum("0 1 2 3\n"), Err(IoError::Parse { line: 1, .. })));
        assert!(read_tum("# comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn odometry_csv_roundtrip_is_exact() {
        let meas = vec![pose([0.5, 0.01, 0.0, 0.0, 0.001, 0.1]), pose([0.4, 0.0, 0.02, 0.0, 0.0, -0.3])];
        let cov = vec![Vector6::repeat(1e-4), Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)];
        let log = OdometryLog { meas, cov, degraded: vec![false, true] };
        let text = log.to_csv().unwrap();
        assert!(text.starts_with("i,x,y,z,roll,pitch,yaw,var_x"));
        assert_eq!(OdometryLog::from_csv(&text).unwrap(), log);
        assert_eq!(log.features(1)[6], 1.0);
    }

    #[test]
    fn odometry_csv_requires_consecutive_steps() {
        let text = "i,x,y,z,roll,pitch,yaw,var_x,var_y,var_z,var_roll,var_pitch,var_yaw,degraded\n1,0,0,0,0,0,0,1,1,1,1,1,1,false\n";
        assert!(matches!(OdometryLog::from_csv(text), Err(IoError::Parse { .. })));
    }

    #[test]
    fn proposals_and_verdicts_roundtrip() {
        let p = vec![
            LoopProposal::new(3, 40, pose([0.1, 0.2, 0.0, 0.0, 0.0, 0.05]), Vector6::repeat(4e-4), 0.03),
            LoopProposal::new(5, 60, Pose6::identity(), Vector6::repeat(1e-3), 0.0),
        ];
        let text = write_proposals(&p, &[false, true]).unwrap();
        let (back, flags) = read_proposals(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(flags, vec![false, true]);

        let res = RejectionResult {
            inliers: vec![p[0]],
            outliers: vec![p[1]],
            pass_rates: vec![1.0, 0.25],
            is_inlier: vec![true, false],
        };
        let text = write_verdicts(&res, &p).unwrap();
        assert_eq!(text, res.to_csv(&p));
        let rows = read_verdicts(&text).unwrap();
        assert!(rows[0].is_inlier() && !rows[1].is_inlier());
        assert_eq!(rows[1].pass_rate, 0.25);
    }

    #[test]
    fn detections_csv_header() {
        let d = vec![Detection { i: 1, j: 30, score: 0.01 }];
        let text = write_detections(&d).unwrap();
        assert_eq!(text, "i,j,score\n1,30,0.01\n");
        assert_eq!(read_detections(&text).unwrap(), d);
    }

    #[test]
    fn jsonl_roundtrip_and_ordering() {
        let v = vec![vec![1.0, 2.5], vec![-0.125, 3.0]];
        let text = write_vectors_jsonl(&v).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"frame_id":0,"vector":[1.0,2.5]}"#);
        assert_eq!(read_vectors_jsonl(&text).unwrap(), v);
        let swapped: String = text.lines().rev().map(|l| format!("{l}\n")).collect();
        assert_eq!(read_vectors_jsonl(&swapped).unwrap(), v);
        assert!(read_vectors_jsonl(r#"{"frame_id":1,"vector":[0.0]}"#).is_err());
    }

    #[test]
    fn g2o_information_convention() {
        let mut g = FactorGraph::from_odometry(Pose6::identity(), &[pose([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])], &[Vector6::new(
            0.01, 0.01, 0.01, 0.04, 0.04, 0.04,
        )])
        .unwrap();
        g.add_loop(0, 1, Pose6::identity(), Vector6::repeat(1.0));
        let text = write_g2o(&g);
        let edge = text.lines().find(|l| l.starts_with("EDGE")).unwrap();
        let info: Vec<f64> = edge.split_whitespace().skip(10).map(|s| s.parse().unwrap()).collect();
        assert_eq!(info.len(), 21);
        // Diagonal positions in the upper triangle: 0, 6, 11, 15, 18, 20.
        assert_relative_eq!(info[0], 100.0);
        assert_relative_eq!(info[15], 100.0);
        assert_relative_eq!(info[20], 100.0);
        assert_eq!(info.iter().filter(|v| **v != 0.0).count(), 6);
        assert!(text.ends_with("FIX 0\n"));
    }

    #[test]
    fn g2o_rejects_unknown_records_and_gaps() {
        assert!(read_g2o("VERTEX_XY 0 1 2\n").is_err());
        assert!(read_g2o("VERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn g2o_roundtrip(
            v in proptest::array::uniform6(-1.0f64..1.0),
            s in proptest::array::uniform6(0.001f64..2.0),
            n_loops in 0usize..3,
        ) {
            let meas: Vec<Pose6> = (0..4).map(|k| pose([v[0] + k as f64, v[1], v[2], v[3], v[4] * 0.5, v[5]])).collect();
            let cov: Vec<Vector6<f64>> = (0..4).map(|_| Vector6::from_column_slice(&s)).collect();
            let mut g = FactorGraph::from_odometry(pose(v), &meas, &cov).unwrap();
            for k in 0..n_loops {
                g.add_loop(k, 4, pose(v), Vector6::from_column_slice(&s));
            }
            g.anchor = 2;
            let back = read_g2o(&write_g2o(&g)).unwrap();
            prop_assert!(back.nodes.len() == g.nodes.len());
            prop_assert!(back.odometry.len() == 4 && back.loops.len() == n_loops && back.anchor == 2);
            for (a, b) in g.nodes.iter().zip(&back.nodes) {
                prop_assert!(close(a, b, 1e-9));
            }
            for (a, b) in g.odometry.iter().zip(&back.odometry) {
                prop_assert!(a.i == b.i && close(&a.meas, &b.meas, 1e-9));
                prop_assert!((a.cov - b.cov).abs().max() <= 1e-12 * a.cov.abs().max());
            }
        }
    }
}
