//! The dual-graph manager: a persistent main graph of keyframes and gate
//! landmarks, plus a short-lived temporary graph that accumulates
//! high-frequency detections between keyframes.
//!
//! When the traveled distance exceeds `d_main`, the temporary graph is
//! optimized and each observed landmark's detections are distilled into one
//! refined edge carried into the main graph against the new keyframe. A
//! refined edge to a landmark already observed from earlier keyframes acts
//! as an implicit loop closure. After every promotion the main graph is
//! re-optimized and the map->odom correction is recomputed, so the corrected
//! estimate `correction * raw_odometry` stays globally consistent.
//!
//! `single_graph_mode` is the ablation baseline: raw detections are buffered
//! over the keyframe interval, transported to the new keyframe through raw
//! odometry, and added as individual edges with no compression.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::assoc::{
    associate, AssociationConfig, DetectionBody, RawDetection, RegistryEntry, RejectionCounts,
};
use crate::geometry::{relative, translational_distance, Mat3, Mat6, Pose};
use crate::graph::{Edge, GateId, Graph, GraphError, LandmarkEstimate, NodeId};
use crate::solver::{marginal_information, optimize, OptReport, SolverConfig, Termination};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkKind {
    Pose,
    Point,
}

/// How the information matrix of a distilled edge is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillInfoMode {
    /// Schur-complement marginal of the landmark in the optimized temporary
    /// graph: the uncertainty of the chained odometry is propagated into the
    /// refined edge.
    SchurMarginal,
    /// Sum of the raw detection-edge informations transported to the
    /// keyframe frame. Treats the intra-interval odometry as exact, which
    /// makes single-observation intervals exactly equivalent to the
    /// single-graph baseline.
    EdgeInfoSum,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualGraphConfig {
    /// Keyframe trigger: traveled distance, m.
    pub d_main: f64,
    /// Minimum spacing of temporary-graph pose nodes, m.
    pub d_temp: f64,
    pub temp_solver: SolverConfig,
    pub main_solver: SolverConfig,
    /// Ablation switch: bypass the temporary graph entirely.
    pub single_graph_mode: bool,
    pub landmark_kind: LandmarkKind,
    pub association: AssociationConfig,
    pub distill_info: DistillInfoMode,
    /// Default odometry edge information (both graphs).
    #[serde(skip)]
    pub odom_information: Mat6,
    /// Default information of SE(3) detection edges.
    #[serde(skip)]
    pub det_se3_information: Mat6,
    /// Default information of point detection edges.
    #[serde(skip)]
    pub det_point_information: Mat3,
    /// Scale of the landmark prior information (localization mode: priors
    /// dominate).
    pub prior_information: f64,
}

fn diag6(t: f64, r: f64) -> Mat6 {
    let mut m = Mat6::zeros();
    for i in 0..3 {
        m[(i, i)] = t;
        m[(i + 3, i + 3)] = r;
    }
    m
}

impl Default for DualGraphConfig {
    fn default() -> Self {
        DualGraphConfig {
            d_main: 2.0,
            d_temp: 0.1,
            temp_solver: SolverConfig::with_max_iterations(10),
            main_solver: SolverConfig::with_max_iterations(15),
            single_graph_mode: false,
            landmark_kind: LandmarkKind::Pose,
            association: AssociationConfig::default(),
            distill_info: DistillInfoMode::SchurMarginal,
            odom_information: diag6(100.0, 400.0),
            det_se3_information: diag6(25.0, 25.0),
            det_point_information: Mat3::identity() * 25.0,
            prior_information: 1e6,
        }
    }
}

impl DualGraphConfig {
    pub fn validate(&self) -> Result<(), DualError> {
        if !(self.d_main > 0.0 && self.d_temp > 0.0) {
            return Err(DualError::Config(
                "d_main and d_temp must be positive".into(),
            ));
        }
        if self.d_temp > self.d_main {
            return Err(DualError::Config(format!(
                "d_temp ({}) must not exceed d_main ({})",
                self.d_temp, self.d_main
            )));
        }
        self.temp_solver.validate().map_err(DualError::Config)?;
        self.main_solver.validate().map_err(DualError::Config)?;
        self.association.validate().map_err(DualError::Config)?;
        if !(self.prior_information > 0.0) {
            return Err(DualError::Config(
                "prior_information must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DualError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("landmark map is empty; localization mode needs known gates")]
    EmptyLandmarkMap,
    #[error("duplicate gate id {0} in landmark map")]
    DuplicateGate(GateId),
    #[error("stamp {stamp} is not after the previous stamp {previous}")]
    NonMonotonicStamp { stamp: f64, previous: f64 },
    #[error("no odometry received before detections at stamp {0}")]
    NoOdometry(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A distilled per-landmark constraint produced by temporary-graph
/// compression, relative to the new keyframe.
#[derive(Clone, Debug)]
pub struct RefinedConstraint {
    pub gate: GateId,
    pub measurement: DetectionBody,
    pub information: DMatrix<f64>,
    pub support_count: usize,
    /// Set when the temporary optimization failed and the constraint fell
    /// back to the best single raw detection.
    pub fallback: bool,
}

/// Per-keyframe diagnostics record, one JSON line each in the run output.
#[derive(Clone, Debug, Serialize)]
pub struct KeyframeDiagnostics {
    pub stamp: f64,
    pub keyframe_index: usize,
    pub main_nodes: usize,
    pub main_edges: usize,
    pub main_detection_edges: usize,
    pub temp_nodes: usize,
    pub temp_edges: usize,
    pub interval_accepted: usize,
    pub distilled: usize,
    pub distill_fallbacks: usize,
    pub opt_iterations: usize,
    pub opt_initial_chi2: f64,
    pub opt_final_chi2: f64,
    pub opt_termination: Termination,
    pub opt_wall_ms: f64,
    /// Temporary-graph optimization and distillation time; zero in
    /// single-graph mode.
    pub compress_wall_ms: f64,
    pub correction_norm: f64,
    pub rejections: RejectionCounts,
}

#[cfg(not(target_arch = "wasm32"))]
fn wall_clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn wall_clock() -> Option<std::time::Instant> {
    None
}

struct TempGraph {
    graph: Graph,
    last_node: NodeId,
    /// Raw odometry pose at the last temporary node.
    last_node_raw: Pose,
    dist_since_node: f64,
    landmarks: BTreeMap<GateId, NodeId>,
    support: BTreeMap<GateId, usize>,
    detection_edges: usize,
}

struct KeyframeRef {
    node: NodeId,
    raw: Pose,
}

/// A raw detection buffered in single-graph mode, with the raw odometry pose
/// at its stamp for later transport to the new keyframe.
struct PendingDetection {
    gate: GateId,
    measurement: DetectionBody,
    raw_at_detection: Pose,
    information_se3: Option<Mat6>,
    information_point: Option<Mat3>,
}

/// The manager: a sequential state machine consuming odometry samples and
/// detection frames in stamp order.
pub struct DualGraphState {
    config: DualGraphConfig,
    main: Graph,
    registry: BTreeMap<GateId, NodeId>,
    temp: Option<TempGraph>,
    pending_single: Vec<PendingDetection>,
    last_stamp: Option<f64>,
    latest_raw: Option<Pose>,
    last_keyframe: Option<KeyframeRef>,
    correction: Pose,
    dist_since_keyframe: f64,
    keyframe_count: usize,
    interval_accepted: usize,
    interval_rejections: RejectionCounts,
    accepted_total: usize,
    diagnostics: Vec<KeyframeDiagnostics>,
}

impl DualGraphState {
    /// Builds the localization-mode state: one landmark node per known gate,
    /// each held by a prior edge. The first odometry sample becomes
    /// keyframe 0 (fixed).
    pub fn init(
        config: DualGraphConfig,
        landmark_map: &[(GateId, Pose)],
    ) -> Result<Self, DualError> {
        config.validate()?;
        if landmark_map.is_empty() {
            return Err(DualError::EmptyLandmarkMap);
        }
        let mut main = Graph::new();
        let mut registry = BTreeMap::new();
        for (gate, prior) in landmark_map {
            let estimate = match config.landmark_kind {
                LandmarkKind::Pose => LandmarkEstimate::Se3(*prior),
                LandmarkKind::Point => LandmarkEstimate::Point(prior.translation),
            };
            let node = main
                .add_landmark_node(*gate, estimate, false)
                .map_err(|e| match e {
                    GraphError::DuplicateGate(g) => DualError::DuplicateGate(g),
                    other => DualError::Graph(other),
                })?;
            match config.landmark_kind {
                LandmarkKind::Pose => main.add_edge(Edge::PriorSe3 {
                    node,
                    measurement: *prior,
                    information: Mat6::identity() * config.prior_information,
                })?,
                LandmarkKind::Point => main.add_edge(Edge::PriorPoint {
                    node,
                    measurement: prior.translation,
                    information: Mat3::identity() * config.prior_information,
                })?,
            }
            registry.insert(*gate, node);
        }
        Ok(DualGraphState {
            config,
            main,
            registry,
            temp: None,
            pending_single: Vec::new(),
            last_stamp: None,
            latest_raw: None,
            last_keyframe: None,
            correction: Pose::identity(),
            dist_since_keyframe: 0.0,
            keyframe_count: 0,
            interval_accepted: 0,
            interval_rejections: RejectionCounts::default(),
            accepted_total: 0,
            diagnostics: Vec::new(),
        })
    }

    pub fn main_graph(&self) -> &Graph {
        &self.main
    }

    pub fn correction(&self) -> Pose {
        self.correction
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframe_count
    }

    pub fn accepted_detections(&self) -> usize {
        self.accepted_total
    }

    pub fn landmark_count(&self) -> usize {
        self.registry.len()
    }

    pub fn drain_diagnostics(&mut self) -> Vec<KeyframeDiagnostics> {
        std::mem::take(&mut self.diagnostics)
    }

    /// Current best estimate of every gate, from the main graph.
    fn landmark_registry(&self) -> Vec<RegistryEntry> {
        self.registry
            .iter()
            .map(|(gate, node)| {
                let pose = match self.main.landmark(*node).expect("registry node").estimate {
                    LandmarkEstimate::Se3(p) => p,
                    LandmarkEstimate::Point(p) => Pose::new(crate::Rotation::identity(), p),
                };
                RegistryEntry { gate: *gate, pose }
            })
            .collect()
    }

    /// Feeds one raw odometry sample; returns the corrected pose
    /// `correction * raw`. Triggers a keyframe promotion when the traveled
    /// distance since the last keyframe reaches `d_main`.
    pub fn process_odometry(&mut self, stamp: f64, raw: Pose) -> Result<Pose, DualError> {
        if let Some(prev) = self.last_stamp {
            if stamp <= prev {
                return Err(DualError::NonMonotonicStamp {
                    stamp,
                    previous: prev,
                });
            }
        }
        self.last_stamp = Some(stamp);

        let Some(prev_raw) = self.latest_raw else {
            // first sample: keyframe 0, fixed, correction stays identity
            let node = self.main.add_pose_node(raw, stamp, true);
            self.last_keyframe = Some(KeyframeRef { node, raw });
            self.keyframe_count = 1;
            self.latest_raw = Some(raw);
            self.temp = Some(fresh_temp_graph(raw, raw, stamp));
            return Ok(raw);
        };

        let step = translational_distance(&prev_raw, &raw);
        self.dist_since_keyframe += step;
        if let Some(temp) = self.temp.as_mut() {
            temp.dist_since_node += step;
        }
        self.latest_raw = Some(raw);

        if self.dist_since_keyframe >= self.config.d_main {
            self.promote_keyframe()?;
        }
        Ok(self.correction * raw)
    }

    /// Feeds one frame of body-frame detections. Returns the number accepted
    /// by association.
    pub fn process_detections(
        &mut self,
        stamp: f64,
        detections: &[RawDetection],
    ) -> Result<usize, DualError> {
        let Some(raw) = self.latest_raw else {
            return Err(DualError::NoOdometry(stamp));
        };
        if detections.is_empty() {
            return Ok(0);
        }
        // match in the corrected (map) frame against current gate estimates
        let corrected = self.correction * raw;
        let registry = self.landmark_registry();
        let detections = self.coerce_kinds(detections);
        let (accepted, rejections) =
            associate(&corrected, &detections, &registry, &self.config.association);
        self.interval_rejections.add(&rejections);
        if accepted.is_empty() {
            return Ok(0);
        }
        self.interval_accepted += accepted.len();
        self.accepted_total += accepted.len();

        if self.config.single_graph_mode {
            for det in &accepted {
                self.pending_single.push(PendingDetection {
                    gate: det.gate,
                    measurement: det.measurement,
                    raw_at_detection: raw,
                    information_se3: det.information_se3,
                    information_point: det.information_point,
                });
            }
            return Ok(accepted.len());
        }

        let d_temp = self.config.d_temp;
        let det_se3_info = self.config.det_se3_information;
        let det_point_info = self.config.det_point_information;
        let odom_info = self.config.odom_information;
        let landmark_kind = self.config.landmark_kind;
        let temp = self
            .temp
            .as_mut()
            .expect("temp graph exists after keyframe 0");

        // at most one temporary pose node per frame, spaced by d_temp;
        // closer frames attach to the last node with the measurement
        // transported through raw odometry
        if temp.dist_since_node >= d_temp {
            let delta = relative(&temp.last_node_raw, &raw);
            let prev_est = temp.graph.pose(temp.last_node).expect("temp node").estimate;
            let node = temp.graph.add_pose_node(prev_est * delta, stamp, false);
            temp.graph.add_edge(Edge::Odometry {
                from: temp.last_node,
                to: node,
                measurement: delta,
                information: odom_info,
            })?;
            temp.last_node = node;
            temp.last_node_raw = raw;
            temp.dist_since_node = 0.0;
        }
        let transport = relative(&temp.last_node_raw, &raw);

        for det in &accepted {
            let lm_node = match temp.landmarks.get(&det.gate) {
                Some(&n) => n,
                None => {
                    let entry = registry
                        .iter()
                        .find(|r| r.gate == det.gate)
                        .expect("accepted detections reference registry gates");
                    let estimate = match landmark_kind {
                        LandmarkKind::Pose => LandmarkEstimate::Se3(entry.pose),
                        LandmarkKind::Point => LandmarkEstimate::Point(entry.pose.translation),
                    };
                    let n = temp.graph.add_landmark_node(det.gate, estimate, false)?;
                    temp.landmarks.insert(det.gate, n);
                    n
                }
            };
            match (&det.measurement, landmark_kind) {
                (DetectionBody::Se3(m), LandmarkKind::Pose) => {
                    temp.graph.add_edge(Edge::DetectionSe3 {
                        pose: temp.last_node,
                        landmark: lm_node,
                        measurement: transport * *m,
                        information: det.information_se3.unwrap_or(det_se3_info),
                    })?;
                }
                (m, LandmarkKind::Point) => {
                    temp.graph.add_edge(Edge::DetectionPoint {
                        pose: temp.last_node,
                        landmark: lm_node,
                        measurement: transport.transform_point(&m.position()),
                        information: det.information_point.unwrap_or(det_point_info),
                    })?;
                }
                (DetectionBody::Point(_), LandmarkKind::Pose) => {
                    unreachable!("coerce_kinds maps measurements to the landmark kind")
                }
            }
            temp.detection_edges += 1;
            *temp.support.entry(det.gate).or_insert(0) += 1;
        }
        Ok(accepted.len())
    }

    /// Maps measurements to the configured landmark kind: SE(3) detections
    /// lose their orientation in point mode; position-only detections cannot
    /// constrain pose landmarks and are dropped before association.
    fn coerce_kinds(&self, detections: &[RawDetection]) -> Vec<RawDetection> {
        detections
            .iter()
            .filter_map(|d| match (&d.measurement, self.config.landmark_kind) {
                (DetectionBody::Se3(_), LandmarkKind::Pose) => Some(d.clone()),
                (DetectionBody::Se3(p), LandmarkKind::Point) => Some(RawDetection {
                    stamp: d.stamp,
                    measurement: DetectionBody::Point(p.translation),
                    information_se3: None,
                    information_point: d.information_point,
                }),
                (DetectionBody::Point(_), LandmarkKind::Point) => Some(d.clone()),
                (DetectionBody::Point(_), LandmarkKind::Pose) => None,
            })
            .collect()
    }

    /// Optimizes the temporary graph and distills one refined constraint per
    /// observed landmark, relative to the would-be new keyframe at the
    /// current odometry pose. The temporary graph is consumed.
    pub fn compress_temporary(&mut self) -> Result<Vec<RefinedConstraint>, DualError> {
        let raw = self.latest_raw.expect("compression requires odometry");
        let stamp = self.last_stamp.unwrap_or(0.0);
        let Some(mut temp) = self.temp.take() else {
            return Ok(Vec::new());
        };
        if temp.detection_edges == 0 {
            return Ok(Vec::new());
        }

        // close the chain with a node at the new keyframe's pose
        let delta = relative(&temp.last_node_raw, &raw);
        let prev_est = temp.graph.pose(temp.last_node).expect("temp node").estimate;
        let kf_node = temp.graph.add_pose_node(prev_est * delta, stamp, false);
        temp.graph.add_edge(Edge::Odometry {
            from: temp.last_node,
            to: kf_node,
            measurement: delta,
            information: self.config.odom_information,
        })?;

        let opt_ok = matches!(
            optimize(&mut temp.graph, &self.config.temp_solver),
            Ok(OptReport {
                termination: Termination::Converged | Termination::Budget,
                ..
            })
        );

        let kf_pose = temp.graph.pose(kf_node).expect("kf node").estimate;
        let mut refined = Vec::new();
        for (&gate, &lm_node) in &temp.landmarks {
            let support = temp.support.get(&gate).copied().unwrap_or(0);
            if support == 0 {
                continue;
            }
            if opt_ok {
                let measurement = refined_measurement(&temp.graph, kf_pose, lm_node);
                let information = match self.config.distill_info {
                    DistillInfoMode::SchurMarginal => marginal_information(&temp.graph, lm_node)?,
                    DistillInfoMode::EdgeInfoSum => {
                        summed_information(&temp.graph, lm_node, kf_pose, self.config.landmark_kind)
                    }
                };
                refined.push(RefinedConstraint {
                    gate,
                    measurement,
                    information,
                    support_count: support,
                    fallback: false,
                });
            } else if let Some(c) = best_single_fallback(&temp.graph, kf_node, gate, lm_node) {
                refined.push(c);
            }
        }
        Ok(refined)
    }

    /// Creates the next keyframe: compresses the temporary graph (or drains
    /// the single-mode buffer), adds the new pose node and odometry edge,
    /// attaches the detection edges, re-optimizes the main graph and
    /// recomputes the map->odom correction.
    pub fn promote_keyframe(&mut self) -> Result<OptReport, DualError> {
        let raw = self.latest_raw.ok_or(DualError::NoOdometry(f64::NAN))?;
        let stamp = self.last_stamp.unwrap_or(0.0);
        let prev = self
            .last_keyframe
            .as_ref()
            .expect("promotion requires keyframe 0");
        let prev_node = prev.node;
        let prev_raw = prev.raw;

        // distill before touching the main graph
        let compress_start = wall_clock();
        let (refined, temp_nodes, temp_edges, distill_fallbacks) = if self.config.single_graph_mode
        {
            (Vec::new(), 0, 0, 0)
        } else {
            let (tn, te) = self
                .temp
                .as_ref()
                .map(|t| (t.graph.num_nodes(), t.graph.num_edges()))
                .unwrap_or((0, 0));
            let refined = self.compress_temporary()?;
            let fb = refined.iter().filter(|r| r.fallback).count();
            (refined, tn, te, fb)
        };
        let compress_wall_ms = compress_start
            .map(|t| t.elapsed().as_secs_f64() * 1e3)
            .unwrap_or(0.0);
        let distilled = refined.len();

        // new keyframe at the corrected current estimate
        let kf_node = self.main.add_pose_node(self.correction * raw, stamp, false);
        self.main.add_edge(Edge::Odometry {
            from: prev_node,
            to: kf_node,
            measurement: relative(&prev_raw, &raw),
            information: self.config.odom_information,
        })?;

        if self.config.single_graph_mode {
            let pending = std::mem::take(&mut self.pending_single);
            for det in pending {
                let node = self.registry[&det.gate];
                let transport = relative(&raw, &det.raw_at_detection);
                match (det.measurement, self.config.landmark_kind) {
                    (DetectionBody::Se3(m), LandmarkKind::Pose) => {
                        self.main.add_edge(Edge::DetectionSe3 {
                            pose: kf_node,
                            landmark: node,
                            measurement: transport * m,
                            information: det
                                .information_se3
                                .unwrap_or(self.config.det_se3_information),
                        })?;
                    }
                    (m, LandmarkKind::Point) => {
                        self.main.add_edge(Edge::DetectionPoint {
                            pose: kf_node,
                            landmark: node,
                            measurement: transport.transform_point(&m.position()),
                            information: det
                                .information_point
                                .unwrap_or(self.config.det_point_information),
                        })?;
                    }
                    (DetectionBody::Point(_), LandmarkKind::Pose) => {
                        unreachable!("kinds coerced at acceptance")
                    }
                }
            }
        } else {
            for c in &refined {
                let node = self.registry[&c.gate];
                match (&c.measurement, self.config.landmark_kind) {
                    (DetectionBody::Se3(m), LandmarkKind::Pose) => {
                        let mut info = Mat6::zeros();
                        for r in 0..6 {
                            for cc in 0..6 {
                                info[(r, cc)] = c.information[(r, cc)];
                            }
                        }
                        self.main.add_edge(Edge::DetectionSe3 {
                            pose: kf_node,
                            landmark: node,
                            measurement: *m,
                            information: info,
                        })?;
                    }
                    (DetectionBody::Point(p), LandmarkKind::Point) => {
                        let mut info = Mat3::zeros();
                        for r in 0..3 {
                            for cc in 0..3 {
                                info[(r, cc)] = c.information[(r, cc)];
                            }
                        }
                        self.main.add_edge(Edge::DetectionPoint {
                            pose: kf_node,
                            landmark: node,
                            measurement: *p,
                            information: info,
                        })?;
                    }
                    _ => unreachable!("refined constraints match the landmark kind"),
                }
            }
        }

        // re-optimize. The optimizer always leaves the best accepted
        // estimates in place (a stall with no accepted step leaves the
        // initial ones, which reproduce the previous correction exactly),
        // so the correction is recomputed unconditionally.
        let report = optimize(&mut self.main, &self.config.main_solver)?;
        let kf_opt = self.main.pose(kf_node).expect("new keyframe").estimate;
        self.correction = kf_opt * raw.inverse();

        self.keyframe_count += 1;
        self.last_keyframe = Some(KeyframeRef { node: kf_node, raw });
        self.dist_since_keyframe = 0.0;
        let kf_pose = self.main.pose(kf_node).expect("new keyframe").estimate;
        self.temp = Some(fresh_temp_graph(kf_pose, raw, stamp));

        self.diagnostics.push(KeyframeDiagnostics {
            stamp,
            keyframe_index: self.keyframe_count - 1,
            main_nodes: self.main.num_nodes(),
            main_edges: self.main.num_edges(),
            main_detection_edges: self.main.num_detection_edges(),
            temp_nodes,
            temp_edges,
            interval_accepted: self.interval_accepted,
            distilled,
            distill_fallbacks,
            opt_iterations: report.iterations,
            opt_initial_chi2: report.initial_chi2,
            opt_final_chi2: report.final_chi2,
            opt_termination: report.termination,
            opt_wall_ms: report.wall_ms,
            compress_wall_ms,
            correction_norm: self.correction.translation.norm(),
            rejections: self.interval_rejections,
        });
        self.interval_accepted = 0;
        self.interval_rejections = RejectionCounts::default();

        Ok(report)
    }

    /// Forces a final promotion for the trailing partial interval when it
    /// holds detections. Call at end of stream.
    pub fn finalize(&mut self) -> Result<Option<OptReport>, DualError> {
        if self.last_keyframe.is_none() {
            return Ok(None);
        }
        let has_pending = if self.config.single_graph_mode {
            !self.pending_single.is_empty()
        } else {
            self.temp
                .as_ref()
                .map(|t| t.detection_edges > 0)
                .unwrap_or(false)
        };
        if has_pending && self.dist_since_keyframe > 1e-9 {
            return Ok(Some(self.promote_keyframe()?));
        }
        Ok(None)
    }
}

fn fresh_temp_graph(anchor_pose: Pose, anchor_raw: Pose, stamp: f64) -> TempGraph {
    let mut graph = Graph::new();
    let anchor = graph.add_pose_node(anchor_pose, stamp, true);
    TempGraph {
        graph,
        last_node: anchor,
        last_node_raw: anchor_raw,
        dist_since_node: 0.0,
        landmarks: BTreeMap::new(),
        support: BTreeMap::new(),
        detection_edges: 0,
    }
}

fn refined_measurement(graph: &Graph, kf_pose: Pose, lm_node: NodeId) -> DetectionBody {
    match graph.landmark(lm_node).expect("landmark").estimate {
        LandmarkEstimate::Se3(l) => DetectionBody::Se3(relative(&kf_pose, &l)),
        LandmarkEstimate::Point(p) => DetectionBody::Point(kf_pose.inverse().transform_point(&p)),
    }
}

/// Edge-information sum transported into the refined residual frame. SE(3)
/// residuals live in the landmark's own frame, so informations add directly;
/// point residuals live in the observing body frame and are rotated through
/// the world frame into the keyframe frame.
fn summed_information(
    graph: &Graph,
    lm_node: NodeId,
    kf_pose: Pose,
    kind: LandmarkKind,
) -> DMatrix<f64> {
    match kind {
        LandmarkKind::Pose => {
            let mut sum = Mat6::zeros();
            for edge in graph.edges() {
                if let Edge::DetectionSe3 {
                    landmark,
                    information,
                    ..
                } = edge
                {
                    if *landmark == lm_node {
                        sum += information;
                    }
                }
            }
            DMatrix::from_column_slice(6, 6, sum.as_slice())
        }
        LandmarkKind::Point => {
            let mut world = Mat3::zeros();
            for edge in graph.edges() {
                if let Edge::DetectionPoint {
                    pose,
                    landmark,
                    information,
                    ..
                } = edge
                {
                    if *landmark == lm_node {
                        let r = graph.pose(*pose).expect("pose").estimate.rotation.matrix();
                        world += r * information * r.transpose();
                    }
                }
            }
            let rk = kf_pose.rotation.matrix();
            let m = rk.transpose() * world * rk;
            DMatrix::from_column_slice(3, 3, m.as_slice())
        }
    }
}

/// Solver-failure fallback: the lowest-residual raw detection edge,
/// transported to the keyframe frame along the dead-reckoned chain.
fn best_single_fallback(
    graph: &Graph,
    kf_node: NodeId,
    gate: GateId,
    lm_node: NodeId,
) -> Option<RefinedConstraint> {
    let kf_est = graph.pose(kf_node).expect("kf node").estimate;
    let mut best: Option<(f64, DetectionBody, DMatrix<f64>)> = None;
    for edge in graph.edges() {
        let (residual, body, info) = match edge {
            Edge::DetectionSe3 {
                pose,
                landmark,
                measurement,
                information,
            } if *landmark == lm_node => {
                let node_est = graph.pose(*pose).expect("pose").estimate;
                let transported = relative(&kf_est, &node_est) * *measurement;
                (
                    graph
                        .edge_error(edge)
                        .map(|r| r.norm())
                        .unwrap_or(f64::INFINITY),
                    DetectionBody::Se3(transported),
                    DMatrix::from_column_slice(6, 6, information.as_slice()),
                )
            }
            Edge::DetectionPoint {
                pose,
                landmark,
                measurement,
                information,
            } if *landmark == lm_node => {
                let node_est = graph.pose(*pose).expect("pose").estimate;
                let transported = relative(&kf_est, &node_est).transform_point(measurement);
                (
                    graph
                        .edge_error(edge)
                        .map(|r| r.norm())
                        .unwrap_or(f64::INFINITY),
                    DetectionBody::Point(transported),
                    DMatrix::from_column_slice(3, 3, information.as_slice()),
                )
            }
            _ => continue,
        };
        if best.as_ref().map(|(r, _, _)| residual < *r).unwrap_or(true) {
            best = Some((residual, body, info));
        }
    }
    best.map(|(_, measurement, information)| RefinedConstraint {
        gate,
        measurement,
        information,
        support_count: 1,
        fallback: true,
    })
}
