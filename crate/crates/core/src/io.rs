//! Stream and file formats: JSONL odometry and detection streams, the gate
//! map JSON, TUM trajectory files, and the plain-text graph dump.
//!
//! Quaternions are serialized in `(qx, qy, qz, qw)` order everywhere. Floats
//! are written with the shortest decimal that round-trips, so re-serializing
//! a parsed file reproduces it byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{DetectionBody, RawDetection};
use crate::geometry::{Mat3, Mat6, Pose, Vec3};
use crate::graph::{Edge, GateId, Graph, LandmarkEstimate, Node};
use crate::sim::{DetectionFrame, Gate, SimRun};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line: line + 1,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// JSONL streams

#[derive(Serialize, Deserialize)]
pub struct OdomRecord {
    pub t: f64,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

#[derive(Serialize, Deserialize)]
pub struct DetRecord {
    pub p: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
pub struct DetFrameRecord {
    pub t: f64,
    pub dets: Vec<DetRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct GateRecord {
    pub id: u32,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

pub fn write_odometry_jsonl(stream: &[(f64, Pose)]) -> String {
    let mut out = String::new();
    for (t, pose) in stream {
        let rec = OdomRecord {
            t: *t,
            p: [pose.translation.x, pose.translation.y, pose.translation.z],
            q: pose.rotation.quaternion_xyzw(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

pub fn read_odometry_jsonl(text: &str) -> Result<Vec<(f64, Pose)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: OdomRecord =
            serde_json::from_str(line).map_err(|e| parse_err(i, e.to_string()))?;
        out.push((rec.t, Pose::from_parts(rec.p, rec.q)));
    }
    Ok(out)
}

pub fn write_detections_jsonl(frames: &[DetectionFrame]) -> String {
    let mut out = String::new();
    for frame in frames {
        let rec = DetFrameRecord {
            t: frame.stamp,
            dets: frame
                .detections
                .iter()
                .map(|d| match &d.measurement {
                    DetectionBody::Se3(m) => DetRecord {
                        p: [m.translation.x, m.translation.y, m.translation.z],
                        q: Some(m.rotation.quaternion_xyzw()),
                    },
                    DetectionBody::Point(p) => DetRecord {
                        p: [p.x, p.y, p.z],
                        q: None,
                    },
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

pub fn read_detections_jsonl(text: &str) -> Result<Vec<DetectionFrame>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetFrameRecord =
            serde_json::from_str(line).map_err(|e| parse_err(i, e.to_string()))?;
        let detections = rec
            .dets
            .into_iter()
            .map(|d| match d.q {
                Some(q) => RawDetection::se3(rec.t, Pose::from_parts(d.p, q)),
                None => RawDetection::point(rec.t, Vec3::new(d.p[0], d.p[1], d.p[2])),
            })
            .collect();
        out.push(DetectionFrame {
            stamp: rec.t,
            detections,
        });
    }
    Ok(out)
}

pub fn write_gates_json(gates: &[Gate]) -> String {
    let recs: Vec<GateRecord> = gates
        .iter()
        .map(|g| GateRecord {
            id: g.id,
            p: [
                g.pose.translation.x,
                g.pose.translation.y,
                g.pose.translation.z,
            ],
            q: g.pose.rotation.quaternion_xyzw(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("plain struct serializes");
    s.push('\n');
    s
}

pub fn read_gates_json(text: &str) -> Result<Vec<Gate>, IoError> {
    let recs: Vec<GateRecord> = serde_json::from_str(text)?;
    Ok(recs
        .into_iter()
        .map(|r| Gate {
            id: r.id,
            pose: Pose::from_parts(r.p, r.q),
        })
        .collect())
}

/// The landmark map as fed to the localization pipeline.
pub fn gates_to_landmark_map(gates: &[Gate]) -> Vec<(GateId, Pose)> {
    gates.iter().map(|g| (GateId(g.id), g.pose)).collect()
}

// ---------------------------------------------------------------------------
// TUM trajectories: `t x y z qx qy qz qw`, space separated

pub fn write_tum(traj: &[(f64, Pose)]) -> String {
    let mut out = String::new();
    for (t, pose) in traj {
        let q = pose.rotation.quaternion_xyzw();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            t, pose.translation.x, pose.translation.y, pose.translation.z, q[0], q[1], q[2], q[3]
        )
        .expect("writing to string");
    }
    out
}

pub fn read_tum(text: &str) -> Result<Vec<(f64, Pose)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(i, format!("bad float: {e}")))?;
        if fields.len() != 8 {
            return Err(parse_err(
                i,
                format!(
                    "expected 8 fields (t x y z qx qy qz qw), found {}",
                    fields.len()
                ),
            ));
        }
        out.push((
            fields[0],
            Pose::from_parts(
                [fields[1], fields[2], fields[3]],
                [fields[4], fields[5], fields[6], fields[7]],
            ),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// SimRun file set

/// The four files of a simulated run.
pub struct SimRunFiles {
    pub odometry_jsonl: String,
    pub detections_jsonl: String,
    pub gates_json: String,
    pub ground_truth_tum: String,
}

pub fn sim_run_to_files(run: &SimRun) -> SimRunFiles {
    SimRunFiles {
        odometry_jsonl: write_odometry_jsonl(&run.odometry),
        detections_jsonl: write_detections_jsonl(&run.detections),
        gates_json: write_gates_json(&run.gates),
        ground_truth_tum: write_tum(&run.ground_truth),
    }
}

// ---------------------------------------------------------------------------
// Plain-text graph dump
//
// One record per line:
//   POSE id t x y z qx qy qz qw [FIXED]
//   LANDMARK_SE3 id gate x y z qx qy qz qw [FIXED]
//   LANDMARK_XYZ id gate x y z [FIXED]
//   EDGE_ODOM from to <7 pose floats> <21 upper-triangular info floats>
//   EDGE_DET_SE3 pose lm <7 pose floats> <21 info floats>
//   EDGE_DET_XYZ pose lm x y z <6 info floats>
//   EDGE_PRIOR_SE3 node <7 pose floats> <21 info floats>
//   EDGE_PRIOR_XYZ node x y z <6 info floats>

fn push_pose_fields(out: &mut String, pose: &Pose) {
    let q = pose.rotation.quaternion_xyzw();
    write!(
        out,
        " {} {} {} {} {} {} {}",
        pose.translation.x, pose.translation.y, pose.translation.z, q[0], q[1], q[2], q[3]
    )
    .expect("writing to string");
}

fn push_upper_triangular6(out: &mut String, m: &Mat6) {
    for r in 0..6 {
        for c in r..6 {
            write!(out, " {}", m[(r, c)]).expect("writing to string");
        }
    }
}

fn push_upper_triangular3(out: &mut String, m: &Mat3) {
    for r in 0..3 {
        for c in r..3 {
            write!(out, " {}", m[(r, c)]).expect("writing to string");
        }
    }
}

pub fn dump_graph(graph: &Graph) -> String {
    let mut out = String::new();
    for node in graph.nodes() {
        match node {
            Node::Pose(n) => {
                write!(out, "POSE {} {}", n.id, n.stamp).expect("writing to string");
                push_pose_fields(&mut out, &n.estimate);
                if n.fixed {
                    out.push_str(" FIXED");
                }
                out.push('\n');
            }
            Node::Landmark(n) => match &n.estimate {
                LandmarkEstimate::Se3(p) => {
                    write!(out, "LANDMARK_SE3 {} {}", n.id, n.gate).expect("writing to string");
                    push_pose_fields(&mut out, p);
                    if n.fixed {
                        out.push_str(" FIXED");
                    }
                    out.push('\n');
                }
                LandmarkEstimate::Point(p) => {
                    write!(
                        out,
                        "LANDMARK_XYZ {} {} {} {} {}",
                        n.id, n.gate, p.x, p.y, p.z
                    )
                    .expect("writing to string");
                    if n.fixed {
                        out.push_str(" FIXED");
                    }
                    out.push('\n');
                }
            },
        }
    }
    for edge in graph.edges() {
        match edge {
            Edge::Odometry {
                from,
                to,
                measurement,
                information,
            } => {
                write!(out, "EDGE_ODOM {from} {to}").expect("writing to string");
                push_pose_fields(&mut out, measurement);
                push_upper_triangular6(&mut out, information);
                out.push('\n');
            }
            Edge::DetectionSe3 {
                pose,
                landmark,
                measurement,
                information,
            } => {
                write!(out, "EDGE_DET_SE3 {pose} {landmark}").expect("writing to string");
                push_pose_fields(&mut out, measurement);
                push_upper_triangular6(&mut out, information);
                out.push('\n');
            }
            Edge::DetectionPoint {
                pose,
                landmark,
                measurement,
                information,
            } => {
                write!(
                    out,
                    "EDGE_DET_XYZ {pose} {landmark} {} {} {}",
                    measurement.x, measurement.y, measurement.z
                )
                .expect("writing to string");
                push_upper_triangular3(&mut out, information);
                out.push('\n');
            }
            Edge::PriorSe3 {
                node,
                measurement,
                information,
            } => {
                write!(out, "EDGE_PRIOR_SE3 {node}").expect("writing to string");
                push_pose_fields(&mut out, measurement);
                push_upper_triangular6(&mut out, information);
                out.push('\n');
            }
            Edge::PriorPoint {
                node,
                measurement,
                information,
            } => {
                write!(
                    out,
                    "EDGE_PRIOR_XYZ {node} {} {} {}",
                    measurement.x, measurement.y, measurement.z
                )
                .expect("writing to string");
                push_upper_triangular3(&mut out, information);
                out.push('\n');
            }
        }
    }
    out
}

struct FieldParser<'a> {
    fields: Vec<&'a str>,
    cursor: usize,
    line: usize,
}

impl<'a> FieldParser<'a> {
    fn new(line_no: usize, rest: &'a str) -> Self {
        FieldParser {
            fields: rest.split_whitespace().collect(),
            cursor: 0,
            line: line_no,
        }
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        let s = self
            .fields
            .get(self.cursor)
            .ok_or_else(|| parse_err(self.line, "missing field"))?;
        self.cursor += 1;
        s.parse()
            .map_err(|e| parse_err(self.line, format!("bad float {s:?}: {e}")))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        let s = self
            .fields
            .get(self.cursor)
            .ok_or_else(|| parse_err(self.line, "missing field"))?;
        self.cursor += 1;
        s.parse()
            .map_err(|e| parse_err(self.line, format!("bad integer {s:?}: {e}")))
    }

    fn pose(&mut self) -> Result<Pose, IoError> {
        let p = [self.f64()?, self.f64()?, self.f64()?];
        let q = [self.f64()?, self.f64()?, self.f64()?, self.f64()?];
        Ok(Pose::from_parts(p, q))
    }

    fn info6(&mut self) -> Result<Mat6, IoError> {
        let mut m = Mat6::zeros();
        for r in 0..6 {
            for c in r..6 {
                let v = self.f64()?;
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        Ok(m)
    }

    fn info3(&mut self) -> Result<Mat3, IoError> {
        let mut m = Mat3::zeros();
        for r in 0..3 {
            for c in r..3 {
                let v = self.f64()?;
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        Ok(m)
    }

    fn fixed_flag(&mut self) -> bool {
        if self.fields.get(self.cursor) == Some(&"FIXED") {
            self.cursor += 1;
            true
        } else {
            false
        }
    }
}

/// Parses a graph dump. Node ids must appear in order (they are assigned
/// densely on insertion).
pub fn parse_graph(text: &str) -> Result<Graph, IoError> {
    let mut graph = Graph::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        let mut p = FieldParser::new(i, rest);
        match tag {
            "POSE" => {
                let id = p.u32()?;
                let stamp = p.f64()?;
                let pose = p.pose()?;
                let fixed = p.fixed_flag();
                let assigned = graph.add_pose_node(pose, stamp, fixed);
                if assigned.0 != id {
                    return Err(parse_err(i, format!("node id {id} out of order")));
                }
            }
            "LANDMARK_SE3" => {
                let id = p.u32()?;
                let gate = p.u32()?;
                let pose = p.pose()?;
                let fixed = p.fixed_flag();
                let assigned =
                    graph.add_landmark_node(GateId(gate), LandmarkEstimate::Se3(pose), fixed)?;
                if assigned.0 != id {
                    return Err(parse_err(i, format!("node id {id} out of order")));
                }
            }
            "LANDMARK_XYZ" => {
                let id = p.u32()?;
                let gate = p.u32()?;
                let pt = Vec3::new(p.f64()?, p.f64()?, p.f64()?);
                let fixed = p.fixed_flag();
                let assigned =
                    graph.add_landmark_node(GateId(gate), LandmarkEstimate::Point(pt), fixed)?;
                if assigned.0 != id {
                    return Err(parse_err(i, format!("node id {id} out of order")));
                }
            }
            "EDGE_ODOM" => {
                let from = crate::graph::NodeId(p.u32()?);
                let to = crate::graph::NodeId(p.u32()?);
                let measurement = p.pose()?;
                let information = p.info6()?;
                graph.add_edge(Edge::Odometry {
                    from,
                    to,
                    measurement,
                    information,
                })?;
            }
            "EDGE_DET_SE3" => {
                let pose = crate::graph::NodeId(p.u32()?);
                let landmark = crate::graph::NodeId(p.u32()?);
                let measurement = p.pose()?;
                let information = p.info6()?;
                graph.add_edge(Edge::DetectionSe3 {
                    pose,
                    landmark,
                    measurement,
                    information,
                })?;
            }
            "EDGE_DET_XYZ" => {
                let pose = crate::graph::NodeId(p.u32()?);
                let landmark = crate::graph::NodeId(p.u32()?);
                let measurement = Vec3::new(p.f64()?, p.f64()?, p.f64()?);
                let information = p.info3()?;
                graph.add_edge(Edge::DetectionPoint {
                    pose,
                    landmark,
                    measurement,
                    information,
                })?;
            }
            "EDGE_PRIOR_SE3" => {
                let node = crate::graph::NodeId(p.u32()?);
                let measurement = p.pose()?;
                let information = p.info6()?;
                graph.add_edge(Edge::PriorSe3 {
                    node,
                    measurement,
                    information,
                })?;
            }
            "EDGE_PRIOR_XYZ" => {
                let node = crate::graph::NodeId(p.u32()?);
                let measurement = Vec3::new(p.f64()?, p.f64()?, p.f64()?);
                let information = p.info3()?;
                graph.add_edge(Edge::PriorPoint {
                    node,
                    measurement,
                    information,
                })?;
            }
            other => return Err(parse_err(i, format!("unknown record {other:?}"))),
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::sim::{simulate, NoiseModel, TrackSpec};
    use proptest::prelude::*;

    #[test]
    fn odometry_round_trip_is_byte_identical() {
        let run = simulate(&TrackSpec::default(), &NoiseModel::default(), 3);
        let text = write_odometry_jsonl(&run.odometry);
        let parsed = read_odometry_jsonl(&text).unwrap();
        let re = write_odometry_jsonl(&parsed);
        assert_eq!(text, re);
    }

    #[test]
    fn detections_round_trip_is_byte_identical() {
        let run = simulate(&TrackSpec::default(), &NoiseModel::default(), 3);
        let text = write_detections_jsonl(&run.detections);
        let parsed = read_detections_jsonl(&text).unwrap();
        let re = write_detections_jsonl(&parsed);
        assert_eq!(text, re);
    }

    #[test]
    fn gates_round_trip_is_byte_identical() {
        let run = simulate(&TrackSpec::default(), &NoiseModel::default(), 3);
        let text = write_gates_json(&run.gates);
        let parsed = read_gates_json(&text).unwrap();
        assert_eq!(text, write_gates_json(&parsed));
    }

    #[test]
    fn tum_round_trip_is_byte_identical() {
        let run = simulate(&TrackSpec::default(), &NoiseModel::default(), 3);
        let text = write_tum(&run.ground_truth);
        let parsed = read_tum(&text).unwrap();
        assert_eq!(text, write_tum(&parsed));
    }

    #[test]
    fn tum_parse_reports_line_numbers() {
        let text = "0 0 0 0 0 0 0 1\nnot a line\n";
        match read_tum(text) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn graph_dump_round_trip() {
        let mut g = Graph::new();
        let a = g.add_pose_node(
            Pose::new(Rotation::from_yaw(0.3), Vec3::new(1.0, 2.0, 3.0)),
            0.5,
            true,
        );
        let b = g.add_pose_node(
            Pose::new(Rotation::from_yaw(-0.2), Vec3::new(2.0, 2.5, 3.0)),
            1.0,
            false,
        );
        let l_se3 = g
            .add_landmark_node(
                GateId(7),
                LandmarkEstimate::Se3(Pose::new(Rotation::from_yaw(1.0), Vec3::new(5.0, 0.0, 1.5))),
                false,
            )
            .unwrap();
        let l_pt = g
            .add_landmark_node(
                GateId(8),
                LandmarkEstimate::Point(Vec3::new(-1.0, 4.0, 1.5)),
                false,
            )
            .unwrap();
        let mut info6 = Mat6::identity() * 3.0;
        info6[(0, 1)] = 0.25;
        info6[(1, 0)] = 0.25;
        let info3 = Mat3::identity() * 9.0;
        g.add_edge(Edge::Odometry {
            from: a,
            to: b,
            measurement: Pose::new(Rotation::from_yaw(-0.5), Vec3::new(1.0, 0.5, 0.0)),
            information: info6,
        })
        .unwrap();
        g.add_edge(Edge::DetectionSe3 {
            pose: b,
            landmark: l_se3,
            measurement: Pose::new(Rotation::from_yaw(1.2), Vec3::new(3.0, -2.5, -1.5)),
            information: info6,
        })
        .unwrap();
        g.add_edge(Edge::DetectionPoint {
            pose: a,
            landmark: l_pt,
            measurement: Vec3::new(-2.0, 2.0, -1.5),
            information: info3,
        })
        .unwrap();
        g.add_edge(Edge::PriorSe3 {
            node: l_se3,
            measurement: Pose::new(Rotation::from_yaw(1.0), Vec3::new(5.0, 0.0, 1.5)),
            information: info6,
        })
        .unwrap();
        g.add_edge(Edge::PriorPoint {
            node: l_pt,
            measurement: Vec3::new(-1.0, 4.0, 1.5),
            information: info3,
        })
        .unwrap();

        let text = dump_graph(&g);
        let parsed = parse_graph(&text).unwrap();
        assert_eq!(dump_graph(&parsed), text);
        assert_eq!(parsed.num_nodes(), 4);
        assert_eq!(parsed.num_edges(), 5);
        // numerically identical objective
        assert!((parsed.chi2() - g.chi2()).abs() < 1e-15);
    }

    #[test]
    fn parse_graph_rejects_unknown_tag() {
        assert!(matches!(
            parse_graph("WHAT 1 2 3"),
            Err(IoError::Parse { line: 1, .. })
        ));
    }

    proptest! {
        // shortest round-trip float formatting survives arbitrary doubles
        #[test]
        fn tum_floats_round_trip(x in -1e6f64..1e6, y in -1e6f64..1e6, z in -1e3f64..1e3, t in 0f64..1e5) {
            let traj = vec![(t, Pose::new(Rotation::from_yaw(x / 1e6), Vec3::new(x, y, z)))];
            let text = write_tum(&traj);
            let parsed = read_tum(&text).unwrap();
            prop_assert_eq!(text, write_tum(&parsed));
        }
    }
}
