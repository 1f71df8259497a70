//! Shared oracles for the integration and acceptance suites: numeric
//! Jacobians by central finite differences, a dense reference optimizer that
//! never touches the analytic-Jacobian or sparse-solve paths, and random
//! graph generators.

use gateloc_core::geometry::{Mat3, Mat6, Pose, Rotation, Twist, Vec3};
use gateloc_core::graph::{Edge, GateId, Graph, LandmarkEstimate, Node, NodeId};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_pose(rng: &mut impl Rng, trans: f64, angle: f64) -> Pose {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Pose::new(
        Rotation::from_axis_angle(&axis, rng.random_range(0.0..angle)),
        Vec3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        ),
    )
}

pub fn random_spd6(rng: &mut impl Rng, scale: f64) -> Mat6 {
    let mut a = Mat6::zeros();
    for r in 0..6 {
        for c in 0..6 {
            a[(r, c)] = rng.random_range(-1.0..1.0);
        }
    }
    a * a.transpose() * scale + Mat6::identity() * scale
}

pub fn random_spd3(rng: &mut impl Rng, scale: f64) -> Mat3 {
    let mut a = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            a[(r, c)] = rng.random_range(-1.0..1.0);
        }
    }
    a * a.transpose() * scale + Mat3::identity() * scale
}

fn node_dof(graph: &Graph, id: NodeId) -> usize {
    match graph.node(id).unwrap() {
        Node::Pose(_) => 6,
        Node::Landmark(l) => l.estimate.dof(),
    }
}

fn perturb_node(graph: &mut Graph, id: NodeId, axis: usize, h: f64) {
    match graph.node(id).unwrap().clone() {
        Node::Pose(p) => {
            let mut v = nalgebra::Vector6::zeros();
            v[axis] = h;
            let updated = p.estimate * Pose::exp(&Twist::from_vector(&v));
            graph.set_pose_estimate(id, updated).unwrap();
        }
        Node::Landmark(l) => match l.estimate {
            LandmarkEstimate::Se3(p) => {
                let mut v = nalgebra::Vector6::zeros();
                v[axis] = h;
                graph
                    .set_landmark_estimate(
                        id,
                        LandmarkEstimate::Se3(p * Pose::exp(&Twist::from_vector(&v))),
                    )
                    .unwrap();
            }
            LandmarkEstimate::Point(p) => {
                let mut d = Vec3::zeros();
                d[axis] = h;
                graph
                    .set_landmark_estimate(id, LandmarkEstimate::Point(p + d))
                    .unwrap();
            }
        },
    }
}

fn restore_node(graph: &mut Graph, id: NodeId, saved: &Node) {
    match saved {
        Node::Pose(p) => graph.set_pose_estimate(id, p.estimate).unwrap(),
        Node::Landmark(l) => graph.set_landmark_estimate(id, l.estimate).unwrap(),
    }
}

/// Central finite-difference Jacobian of an edge residual with respect to
/// one node, in the right-perturbation convention (step `h`).
pub fn fd_jacobian(graph: &Graph, edge: &Edge, node: NodeId, h: f64) -> DMatrix<f64> {
    let mut g = graph.clone();
    let saved = g.node(node).unwrap().clone();
    let dof = node_dof(&g, node);
    let r0 = g.edge_error(edge).unwrap().to_dvector();
    let mut jac = DMatrix::zeros(r0.len(), dof);
    for axis in 0..dof {
        perturb_node(&mut g, node, axis, h);
        let rp = g.edge_error(edge).unwrap().to_dvector();
        restore_node(&mut g, node, &saved);
        perturb_node(&mut g, node, axis, -h);
        let rm = g.edge_error(edge).unwrap().to_dvector();
        restore_node(&mut g, node, &saved);
        let col = (rp - rm) / (2.0 * h);
        jac.set_column(axis, &col);
    }
    jac
}

/// Normal equations `(H, b)` assembled entirely from finite-difference
/// Jacobians. Comparing against the library's `linearize` verifies every
/// analytic Jacobian block without access to crate internals.
pub fn fd_normal_equations(graph: &Graph, h: f64) -> (DMatrix<f64>, DVector<f64>) {
    let free: Vec<(NodeId, usize)> = graph
        .nodes()
        .filter(|n| !n.fixed())
        .map(|n| {
            (
                n.id(),
                match n {
                    Node::Pose(_) => 6,
                    Node::Landmark(l) => l.estimate.dof(),
                },
            )
        })
        .collect();
    let mut offset = std::collections::BTreeMap::new();
    let mut dim = 0;
    for (id, dof) in &free {
        offset.insert(*id, dim);
        dim += dof;
    }
    let mut hmat = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for edge in graph.edges() {
        let e = graph.edge_error(edge).unwrap().to_dvector();
        let omega = edge_information_dense(edge);
        let (a, bnode) = edge.endpoints();
        let mut parts: Vec<(NodeId, DMatrix<f64>)> = Vec::new();
        for id in [Some(a), bnode].into_iter().flatten() {
            if offset.contains_key(&id) {
                parts.push((id, fd_jacobian(graph, edge, id, h)));
            }
        }
        for (ida, ja) in &parts {
            let oa = offset[ida];
            let jt_omega = ja.transpose() * &omega;
            let gb = &jt_omega * &e;
            for r in 0..gb.len() {
                b[oa + r] += gb[r];
            }
            for (idb, jb) in &parts {
                let ob = offset[idb];
                let hb = &jt_omega * jb;
                for r in 0..hb.nrows() {
                    for c in 0..hb.ncols() {
                        hmat[(oa + r, ob + c)] += hb[(r, c)];
                    }
                }
            }
        }
    }
    (hmat, b)
}

pub fn edge_information_dense(edge: &Edge) -> DMatrix<f64> {
    match edge {
        Edge::Odometry { information, .. }
        | Edge::DetectionSe3 { information, .. }
        | Edge::PriorSe3 { information, .. } => {
            DMatrix::from_column_slice(6, 6, information.as_slice())
        }
        Edge::DetectionPoint { information, .. } | Edge::PriorPoint { information, .. } => {
            DMatrix::from_column_slice(3, 3, information.as_slice())
        }
    }
}

/// Reference Levenberg-Marquardt that shares nothing with the library's
/// solve path: finite-difference Jacobians, dense LU solve, identity-scaled
/// damping. Only the residual evaluation is shared, which is what the
/// Jacobian oracle above independently checks.
pub fn dense_reference_optimize(graph: &mut Graph, max_iterations: usize) -> f64 {
    let free: Vec<(NodeId, usize)> = graph
        .nodes()
        .filter(|n| !n.fixed())
        .map(|n| {
            (
                n.id(),
                match n {
                    Node::Pose(_) => 6,
                    Node::Landmark(l) => l.estimate.dof(),
                },
            )
        })
        .collect();
    let mut lambda = 1e-6;
    let mut chi2 = graph.chi2();
    for _ in 0..max_iterations {
        let (h, b) = fd_normal_equations(graph, 1e-6);
        if b.amax() < 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let mut hd = h.clone();
            for i in 0..hd.nrows() {
                hd[(i, i)] += lambda * hd[(i, i)].max(1e-12);
            }
            let Some(dx) = hd.lu().solve(&(-&b)) else {
                lambda *= 10.0;
                continue;
            };
            let saved: Vec<Node> = graph.nodes().cloned().collect();
            let mut off = 0;
            for (id, dof) in &free {
                match graph.node(*id).unwrap().clone() {
                    Node::Pose(p) => {
                        let v = nalgebra::Vector6::from_iterator((0..6).map(|k| dx[off + k]));
                        graph
                            .set_pose_estimate(*id, p.estimate * Pose::exp(&Twist::from_vector(&v)))
                            .unwrap();
                    }
                    Node::Landmark(l) => match l.estimate {
                        LandmarkEstimate::Se3(p) => {
                            let v = nalgebra::Vector6::from_iterator((0..6).map(|k| dx[off + k]));
                            graph
                                .set_landmark_estimate(
                                    *id,
                                    LandmarkEstimate::Se3(p * Pose::exp(&Twist::from_vector(&v))),
                                )
                                .unwrap();
                        }
                        LandmarkEstimate::Point(p) => {
                            let d = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
                            graph
                                .set_landmark_estimate(*id, LandmarkEstimate::Point(p + d))
                                .unwrap();
                        }
                    },
                }
                off += dof;
            }
            let new_chi2 = graph.chi2();
            if new_chi2 < chi2 {
                chi2 = new_chi2;
                lambda *= 0.3;
                accepted = true;
                break;
            }
            // revert
            for n in &saved {
                match n {
                    Node::Pose(p) => graph.set_pose_estimate(p.id, p.estimate).unwrap(),
                    Node::Landmark(l) => graph.set_landmark_estimate(l.id, l.estimate).unwrap(),
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    chi2
}

/// A random localization-flavored graph: a pose chain with point or SE(3)
/// landmarks, Gaussian-perturbed initialization, consistent measurements
/// corrupted by noise.
pub fn random_problem_graph(
    rng: &mut impl Rng,
    n_poses: usize,
    n_landmarks: usize,
    se3_landmarks: bool,
) -> Graph {
    let mut g = Graph::new();
    let mut truth: Vec<Pose> = Vec::new();
    for i in 0..n_poses {
        truth.push(Pose::new(
            Rotation::from_yaw(0.15 * i as f64 + rng.random_range(-0.1..0.1)),
            Vec3::new(
                1.2 * i as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..0.5),
            ),
        ));
    }
    let mut pose_ids = Vec::new();
    for (i, p) in truth.iter().enumerate() {
        let init = if i == 0 {
            *p
        } else {
            *p * Pose::exp(&Twist::new(
                Vec3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.1..0.1),
                ),
                Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.08..0.08),
                ),
            ))
        };
        pose_ids.push(g.add_pose_node(init, i as f64, i == 0));
    }
    for w in pose_ids.windows(2) {
        let m = gateloc_core::relative(&truth[w[0].0 as usize], &truth[w[1].0 as usize])
            * Pose::exp(&Twist::new(
                Vec3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    0.0,
                ),
                Vec3::new(0.0, 0.0, rng.random_range(-0.01..0.01)),
            ));
        g.add_edge(Edge::Odometry {
            from: w[0],
            to: w[1],
            measurement: m,
            information: Mat6::identity() * 40.0,
        })
        .unwrap();
    }
    for k in 0..n_landmarks {
        let lp = Pose::new(
            Rotation::from_yaw(rng.random_range(-3.0..3.0)),
            Vec3::new(
                rng.random_range(0.0..1.2 * n_poses as f64),
                rng.random_range(-4.0..4.0),
                rng.random_range(0.5..2.0),
            ),
        );
        let lid = if se3_landmarks {
            let init = lp
                * Pose::exp(&Twist::new(
                    Vec3::new(rng.random_range(-0.2..0.2), 0.0, 0.0),
                    Vec3::new(0.0, 0.0, rng.random_range(-0.05..0.05)),
                ));
            g.add_landmark_node(GateId(k as u32), LandmarkEstimate::Se3(init), false)
                .unwrap()
        } else {
            let init = lp.translation + Vec3::new(rng.random_range(-0.2..0.2), 0.0, 0.0);
            g.add_landmark_node(GateId(k as u32), LandmarkEstimate::Point(init), false)
                .unwrap()
        };
        let mut observed = false;
        for (i, &pid) in pose_ids.iter().enumerate() {
            if (truth[i].translation - lp.translation).norm() < 7.0 {
                observed = true;
                if se3_landmarks {
                    let m = gateloc_core::relative(&truth[i], &lp)
                        * Pose::exp(&Twist::new(
                            Vec3::new(rng.random_range(-0.03..0.03), 0.0, 0.0),
                            Vec3::new(0.0, 0.0, rng.random_range(-0.02..0.02)),
                        ));
                    g.add_edge(Edge::DetectionSe3 {
                        pose: pid,
                        landmark: lid,
                        measurement: m,
                        information: Mat6::identity() * 15.0,
                    })
                    .unwrap();
                } else {
                    g.add_edge(Edge::DetectionPoint {
                        pose: pid,
                        landmark: lid,
                        measurement: truth[i].inverse().transform_point(&lp.translation)
                            + Vec3::new(
                                rng.random_range(-0.05..0.05),
                                rng.random_range(-0.05..0.05),
                                rng.random_range(-0.05..0.05),
                            ),
                        information: Mat3::identity() * 15.0,
                    })
                    .unwrap();
                }
            }
        }
        if !observed {
            // keep the graph well posed either way
            if se3_landmarks {
                g.add_edge(Edge::PriorSe3 {
                    node: lid,
                    measurement: lp,
                    information: Mat6::identity() * 100.0,
                })
                .unwrap();
            } else {
                g.add_edge(Edge::PriorPoint {
                    node: lid,
                    measurement: lp.translation,
                    information: Mat3::identity() * 100.0,
                })
                .unwrap();
            }
        }
    }
    g
}
