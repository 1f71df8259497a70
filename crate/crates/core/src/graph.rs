//! Factor-graph data structure: pose/landmark nodes, odometry/detection/prior
//! edges with information matrices, residuals, chi-squared and linearization.
//!
//! Edge residuals follow the Mahalanobis least-squares objective
//! `sum_e  e^T Omega e` with:
//!
//! - odometry:        `log(inv(meas) * inv(x_from) * x_to)`        (6-vector)
//! - detection, SE3:  `log(inv(meas) * inv(x_pose) * l)`           (6-vector)
//! - detection, point:`inv(x_pose) . p_landmark - meas`            (3-vector)
//! - priors:          the same forms against a held measurement
//!
//! Jacobians are analytic, in the right-perturbation convention
//! (`X <- X * exp(d)` for poses and SE(3) landmarks, `p <- p + d` for point
//! landmarks). Fixed nodes are excluded from the variable ordering (hard
//! gauge fix).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SMatrix};
use thiserror::Error;

use crate::geometry::{
    relative, se3_right_jacobian_inverse, skew_matrix, Mat3, Mat6, Pose, Vec3, Vec6,
};

/// Identifier of a node, unique within one graph's lifetime, never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

/// Semantic identifier of a gate landmark, stable across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for GateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    MissingNode(NodeId),
    #[error("gate {0} already registered in this graph")]
    DuplicateGate(GateId),
    #[error("edge references node {node} of the wrong kind: {expected}")]
    KindMismatch {
        node: NodeId,
        expected: &'static str,
    },
    #[error("information matrix is not symmetric positive-definite")]
    BadInformation,
    #[error("free node {0} has no path to a fixed node or prior; gauge is deficient")]
    GaugeDeficiency(NodeId),
    #[error("node {0} is not a free variable of this graph")]
    NotFree(NodeId),
}

#[derive(Clone, Debug)]
pub struct PoseNode {
    pub id: NodeId,
    pub estimate: Pose,
    pub fixed: bool,
    pub stamp: f64,
}

/// Landmark state: a full pose or a position-only point. The kind is fixed
/// at creation.
#[derive(Clone, Copy, Debug)]
pub enum LandmarkEstimate {
    Se3(Pose),
    Point(Vec3),
}

impl LandmarkEstimate {
    pub fn position(&self) -> Vec3 {
        match self {
            LandmarkEstimate::Se3(p) => p.translation,
            LandmarkEstimate::Point(p) => *p,
        }
    }

    pub fn dof(&self) -> usize {
        match self {
            LandmarkEstimate::Se3(_) => 6,
            LandmarkEstimate::Point(_) => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LandmarkNode {
    pub id: NodeId,
    pub gate: GateId,
    pub estimate: LandmarkEstimate,
    pub fixed: bool,
}

#[derive(Clone, Debug)]
pub enum Node {
    Pose(PoseNode),
    Landmark(LandmarkNode),
}

impl Node {
    pub fn id(&self) -> NodeId {
        match self {
            Node::Pose(n) => n.id,
            Node::Landmark(n) => n.id,
        }
    }

    pub fn fixed(&self) -> bool {
        match self {
            Node::Pose(n) => n.fixed,
            Node::Landmark(n) => n.fixed,
        }
    }

    fn dof(&self) -> usize {
        match self {
            Node::Pose(_) => 6,
            Node::Landmark(n) => n.estimate.dof(),
        }
    }
}

/// Measurement payload for detection and prior edges.
#[derive(Clone, Copy, Debug)]
pub enum Measurement {
    Se3(Pose),
    Point(Vec3),
}

#[derive(Clone, Debug)]
pub enum Edge {
    /// Relative pose constraint between two pose nodes.
    Odometry {
        from: NodeId,
        to: NodeId,
        measurement: Pose,
        information: Mat6,
    },
    /// Full relative pose observation of an SE(3) landmark, in the observing
    /// pose's body frame.
    DetectionSe3 {
        pose: NodeId,
        landmark: NodeId,
        measurement: Pose,
        information: Mat6,
    },
    /// Position-only observation of a point landmark, in the observing
    /// pose's body frame.
    DetectionPoint {
        pose: NodeId,
        landmark: NodeId,
        measurement: Vec3,
        information: Mat3,
    },
    /// SE(3) prior on a pose node or SE(3) landmark.
    PriorSe3 {
        node: NodeId,
        measurement: Pose,
        information: Mat6,
    },
    /// Position prior on a point landmark.
    PriorPoint {
        node: NodeId,
        measurement: Vec3,
        information: Mat3,
    },
}

impl Edge {
    /// Nodes referenced by this edge, binary edges first endpoint first.
    pub fn endpoints(&self) -> (NodeId, Option<NodeId>) {
        match self {
            Edge::Odometry { from, to, .. } => (*from, Some(*to)),
            Edge::DetectionSe3 { pose, landmark, .. }
            | Edge::DetectionPoint { pose, landmark, .. } => (*pose, Some(*landmark)),
            Edge::PriorSe3 { node, .. } | Edge::PriorPoint { node, .. } => (*node, None),
        }
    }

    pub fn is_detection(&self) -> bool {
        matches!(
            self,
            Edge::DetectionSe3 { .. } | Edge::DetectionPoint { .. }
        )
    }
}

/// Residual of an edge, kept at fixed size for the inner loops.
#[derive(Clone, Copy, Debug)]
pub enum Residual {
    R6(Vec6),
    R3(Vec3),
}

impl Residual {
    pub fn to_dvector(&self) -> DVector<f64> {
        match self {
            Residual::R6(v) => DVector::from_column_slice(v.as_slice()),
            Residual::R3(v) => DVector::from_column_slice(v.as_slice()),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Residual::R6(v) => v.norm(),
            Residual::R3(v) => v.norm(),
        }
    }
}

type Mat3x6 = SMatrix<f64, 3, 6>;

/// Residual and analytic Jacobian blocks of one edge, right-perturbation
/// convention, ordered as the edge's endpoints.
pub(crate) enum EdgeLinearization {
    Odometry { e: Vec6, j_from: Mat6, j_to: Mat6 },
    DetSe3 { e: Vec6, j_pose: Mat6, j_lm: Mat6 },
    DetPoint { e: Vec3, j_pose: Mat3x6, j_lm: Mat3 },
    PriorSe3 { e: Vec6, j: Mat6 },
    PriorPoint { e: Vec3, j: Mat3 },
}

fn check_information(m: &DMatrix<f64>) -> Result<(), GraphError> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * m[(i, i)].abs().max(1.0) {
                return Err(GraphError::BadInformation);
            }
        }
    }
    if m.clone().cholesky().is_none() {
        return Err(GraphError::BadInformation);
    }
    Ok(())
}

/// The factor graph. Nodes are only ever added, so `NodeId` doubles as the
/// index into the node table.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    gates: BTreeMap<GateId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn add_pose_node(&mut self, estimate: Pose, stamp: f64, fixed: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node::Pose(PoseNode {
            id,
            estimate,
            fixed,
            stamp,
        }));
        id
    }

    pub fn add_landmark_node(
        &mut self,
        gate: GateId,
        estimate: LandmarkEstimate,
        fixed: bool,
    ) -> Result<NodeId, GraphError> {
        if self.gates.contains_key(&gate) {
            return Err(GraphError::DuplicateGate(gate));
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node::Landmark(LandmarkNode {
            id,
            gate,
            estimate,
            fixed,
        }));
        self.gates.insert(gate, id);
        Ok(id)
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        match &edge {
            Edge::Odometry {
                from,
                to,
                information,
                ..
            } => {
                self.pose(*from)?;
                self.pose(*to)?;
                check_information(&DMatrix::from_column_slice(6, 6, information.as_slice()))?;
            }
            Edge::DetectionSe3 {
                pose,
                landmark,
                information,
                ..
            } => {
                self.pose(*pose)?;
                let lm = self.landmark(*landmark)?;
                if !matches!(lm.estimate, LandmarkEstimate::Se3(_)) {
                    return Err(GraphError::KindMismatch {
                        node: *landmark,
                        expected: "SE3 landmark",
                    });
                }
                check_information(&DMatrix::from_column_slice(6, 6, information.as_slice()))?;
            }
            Edge::DetectionPoint {
                pose,
                landmark,
                information,
                ..
            } => {
                self.pose(*pose)?;
                let lm = self.landmark(*landmark)?;
                if !matches!(lm.estimate, LandmarkEstimate::Point(_)) {
                    return Err(GraphError::KindMismatch {
                        node: *landmark,
                        expected: "point landmark",
                    });
                }
                check_information(&DMatrix::from_column_slice(3, 3, information.as_slice()))?;
            }
            Edge::PriorSe3 {
                node, information, ..
            } => {
                match self.node(*node)? {
                    Node::Pose(_) => {}
                    Node::Landmark(lm) => {
                        if !matches!(lm.estimate, LandmarkEstimate::Se3(_)) {
                            return Err(GraphError::KindMismatch {
                                node: *node,
                                expected: "pose node or SE3 landmark",
                            });
                        }
                    }
                }
                check_information(&DMatrix::from_column_slice(6, 6, information.as_slice()))?;
            }
            Edge::PriorPoint {
                node, information, ..
            } => {
                let lm = self.landmark(*node)?;
                if !matches!(lm.estimate, LandmarkEstimate::Point(_)) {
                    return Err(GraphError::KindMismatch {
                        node: *node,
                        expected: "point landmark",
                    });
                }
                check_information(&DMatrix::from_column_slice(3, 3, information.as_slice()))?;
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(GraphError::MissingNode(id))
    }

    pub fn pose(&self, id: NodeId) -> Result<&PoseNode, GraphError> {
        match self.node(id)? {
            Node::Pose(n) => Ok(n),
            Node::Landmark(_) => Err(GraphError::KindMismatch {
                node: id,
                expected: "pose node",
            }),
        }
    }

    pub fn landmark(&self, id: NodeId) -> Result<&LandmarkNode, GraphError> {
        match self.node(id)? {
            Node::Landmark(n) => Ok(n),
            Node::Pose(_) => Err(GraphError::KindMismatch {
                node: id,
                expected: "landmark node",
            }),
        }
    }

    pub fn landmark_by_gate(&self, gate: GateId) -> Option<NodeId> {
        self.gates.get(&gate).copied()
    }

    pub fn set_pose_estimate(&mut self, id: NodeId, estimate: Pose) -> Result<(), GraphError> {
        match self.nodes.get_mut(id.0 as usize) {
            Some(Node::Pose(n)) => {
                n.estimate = estimate;
                Ok(())
            }
            Some(Node::Landmark(_)) => Err(GraphError::KindMismatch {
                node: id,
                expected: "pose node",
            }),
            None => Err(GraphError::MissingNode(id)),
        }
    }

    pub fn set_landmark_estimate(
        &mut self,
        id: NodeId,
        estimate: LandmarkEstimate,
    ) -> Result<(), GraphError> {
        match self.nodes.get_mut(id.0 as usize) {
            Some(Node::Landmark(n)) => {
                match (&n.estimate, &estimate) {
                    (LandmarkEstimate::Se3(_), LandmarkEstimate::Se3(_))
                    | (LandmarkEstimate::Point(_), LandmarkEstimate::Point(_)) => {}
                    _ => {
                        return Err(GraphError::KindMismatch {
                            node: id,
                            expected: "landmark of the same kind",
                        })
                    }
                }
                n.estimate = estimate;
                Ok(())
            }
            Some(Node::Pose(_)) => Err(GraphError::KindMismatch {
                node: id,
                expected: "landmark node",
            }),
            None => Err(GraphError::MissingNode(id)),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_detection_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.is_detection()).count()
    }

    /// Residual vector of one edge at the current estimates.
    pub fn edge_error(&self, edge: &Edge) -> Result<Residual, GraphError> {
        Ok(match edge {
            Edge::Odometry {
                from,
                to,
                measurement,
                ..
            } => {
                let xf = self.pose(*from)?.estimate;
                let xt = self.pose(*to)?.estimate;
                Residual::R6(
                    (measurement.inverse() * relative(&xf, &xt))
                        .log()
                        .as_vector(),
                )
            }
            Edge::DetectionSe3 {
                pose,
                landmark,
                measurement,
                ..
            } => {
                let x = self.pose(*pose)?.estimate;
                let l = match self.landmark(*landmark)?.estimate {
                    LandmarkEstimate::Se3(p) => p,
                    LandmarkEstimate::Point(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *landmark,
                            expected: "SE3 landmark",
                        })
                    }
                };
                Residual::R6((measurement.inverse() * relative(&x, &l)).log().as_vector())
            }
            Edge::DetectionPoint {
                pose,
                landmark,
                measurement,
                ..
            } => {
                let x = self.pose(*pose)?.estimate;
                let p = match self.landmark(*landmark)?.estimate {
                    LandmarkEstimate::Point(p) => p,
                    LandmarkEstimate::Se3(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *landmark,
                            expected: "point landmark",
                        })
                    }
                };
                Residual::R3(x.inverse().transform_point(&p) - measurement)
            }
            Edge::PriorSe3 {
                node, measurement, ..
            } => {
                let est = match self.node(*node)? {
                    Node::Pose(n) => n.estimate,
                    Node::Landmark(n) => match n.estimate {
                        LandmarkEstimate::Se3(p) => p,
                        LandmarkEstimate::Point(_) => {
                            return Err(GraphError::KindMismatch {
                                node: *node,
                                expected: "SE3 state",
                            })
                        }
                    },
                };
                Residual::R6((measurement.inverse() * est).log().as_vector())
            }
            Edge::PriorPoint {
                node, measurement, ..
            } => {
                let p = match self.landmark(*node)?.estimate {
                    LandmarkEstimate::Point(p) => p,
                    LandmarkEstimate::Se3(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *node,
                            expected: "point landmark",
                        })
                    }
                };
                Residual::R3(p - measurement)
            }
        })
    }

    /// Mahalanobis contribution of one edge: `e^T Omega e`.
    pub fn edge_chi2(&self, edge: &Edge) -> Result<f64, GraphError> {
        let r = self.edge_error(edge)?;
        Ok(match (r, edge) {
            (Residual::R6(e), Edge::Odometry { information, .. })
            | (Residual::R6(e), Edge::DetectionSe3 { information, .. })
            | (Residual::R6(e), Edge::PriorSe3 { information, .. }) => {
                (e.transpose() * information * e)[0]
            }
            (Residual::R3(e), Edge::DetectionPoint { information, .. })
            | (Residual::R3(e), Edge::PriorPoint { information, .. }) => {
                (e.transpose() * information * e)[0]
            }
            _ => unreachable!("residual dimension always matches the edge kind"),
        })
    }

    /// Total objective value over all edges.
    pub fn chi2(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| self.edge_chi2(e).expect("edges are validated on insert"))
            .sum()
    }

    pub(crate) fn edge_linearization(&self, edge: &Edge) -> Result<EdgeLinearization, GraphError> {
        Ok(match edge {
            Edge::Odometry {
                from,
                to,
                measurement,
                ..
            } => {
                let xf = self.pose(*from)?.estimate;
                let xt = self.pose(*to)?.estimate;
                let t = relative(&xf, &xt);
                let err = (measurement.inverse() * t).log();
                let jr_inv = se3_right_jacobian_inverse(&err);
                EdgeLinearization::Odometry {
                    e: err.as_vector(),
                    j_from: -jr_inv * t.inverse().adjoint(),
                    j_to: jr_inv,
                }
            }
            Edge::DetectionSe3 {
                pose,
                landmark,
                measurement,
                ..
            } => {
                let x = self.pose(*pose)?.estimate;
                let l = match self.landmark(*landmark)?.estimate {
                    LandmarkEstimate::Se3(p) => p,
                    LandmarkEstimate::Point(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *landmark,
                            expected: "SE3 landmark",
                        })
                    }
                };
                let t = relative(&x, &l);
                let err = (measurement.inverse() * t).log();
                let jr_inv = se3_right_jacobian_inverse(&err);
                EdgeLinearization::DetSe3 {
                    e: err.as_vector(),
                    j_pose: -jr_inv * t.inverse().adjoint(),
                    j_lm: jr_inv,
                }
            }
            Edge::DetectionPoint {
                pose,
                landmark,
                measurement,
                ..
            } => {
                let x = self.pose(*pose)?.estimate;
                let p = match self.landmark(*landmark)?.estimate {
                    LandmarkEstimate::Point(p) => p,
                    LandmarkEstimate::Se3(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *landmark,
                            expected: "point landmark",
                        })
                    }
                };
                let body = x.inverse().transform_point(&p);
                let mut j_pose = Mat3x6::zeros();
                j_pose
                    .fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-Mat3::identity()));
                j_pose
                    .fixed_view_mut::<3, 3>(0, 3)
                    .copy_from(&skew_matrix(&body));
                EdgeLinearization::DetPoint {
                    e: body - measurement,
                    j_pose,
                    j_lm: x.rotation.matrix().transpose(),
                }
            }
            Edge::PriorSe3 {
                node, measurement, ..
            } => {
                let est = match self.node(*node)? {
                    Node::Pose(n) => n.estimate,
                    Node::Landmark(n) => match n.estimate {
                        LandmarkEstimate::Se3(p) => p,
                        LandmarkEstimate::Point(_) => {
                            return Err(GraphError::KindMismatch {
                                node: *node,
                                expected: "SE3 state",
                            })
                        }
                    },
                };
                let err = (measurement.inverse() * est).log();
                EdgeLinearization::PriorSe3 {
                    e: err.as_vector(),
                    j: se3_right_jacobian_inverse(&err),
                }
            }
            Edge::PriorPoint {
                node, measurement, ..
            } => {
                let p = match self.landmark(*node)?.estimate {
                    LandmarkEstimate::Point(p) => p,
                    LandmarkEstimate::Se3(_) => {
                        return Err(GraphError::KindMismatch {
                            node: *node,
                            expected: "point landmark",
                        })
                    }
                };
                EdgeLinearization::PriorPoint {
                    e: p - measurement,
                    j: Mat3::identity(),
                }
            }
        })
    }

    /// Checks that every free node is anchored: connected through edges to a
    /// fixed node, or touched (directly or through its component) by a prior
    /// edge. Prior edges count as anchors because they pin their node to the
    /// world frame; without this a landmark held only by its map prior would
    /// be falsely reported as gauge-deficient.
    pub(crate) fn check_gauge(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        fn union(parent: &mut [usize], a: usize, b: usize) {
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let mut anchored = vec![false; n];
        for edge in &self.edges {
            match edge.endpoints() {
                (a, Some(b)) => union(&mut parent, a.0 as usize, b.0 as usize),
                (a, None) => anchored[a.0 as usize] = true,
            }
        }
        let mut root_anchored = vec![false; n];
        for i in 0..n {
            if self.nodes[i].fixed() || anchored[i] {
                let r = find(&mut parent, i);
                root_anchored[r] = true;
            }
        }
        for i in 0..n {
            if !self.nodes[i].fixed() {
                let r = find(&mut parent, i);
                if !root_anchored[r] {
                    return Err(GraphError::GaugeDeficiency(NodeId(i as u32)));
                }
            }
        }
        Ok(())
    }

    /// Free (non-fixed) nodes in id order, with their tangent dimensions.
    pub(crate) fn free_blocks(&self) -> Vec<(NodeId, usize)> {
        self.nodes
            .iter()
            .filter(|n| !n.fixed())
            .map(|n| (n.id(), n.dof()))
            .collect()
    }
}
