//! Levenberg-Marquardt nonlinear least squares over a [`Graph`].
//!
//! Each iteration linearizes the graph into block normal equations
//! `H = sum J^T Omega J`, `b = sum J^T Omega e`, solves the damped system
//! `(H + lambda diag(H)) dx = -b` with a Cholesky factorization, and applies
//! right-perturbation updates. Below [`DENSE_BLOCK_THRESHOLD`] free blocks
//! the solve is dense; above it a scalar sparse Cholesky with a greedy
//! minimum-degree fill-reducing ordering is used.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::geometry::{Pose, Twist};
use crate::graph::{EdgeLinearization, Graph, GraphError, LandmarkEstimate, Node, NodeId};

/// Free-block count under which the dense solve path is used.
pub const DENSE_BLOCK_THRESHOLD: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub chi2_rel_tol: f64,
    pub step_norm_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 15,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            chi2_rel_tol: 1e-9,
            step_norm_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn with_max_iterations(max_iterations: usize) -> Self {
        SolverConfig {
            max_iterations,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be >= 1".into());
        }
        for (name, v) in [
            ("lambda_init", self.lambda_init),
            ("lambda_up", self.lambda_up),
            ("lambda_down", self.lambda_down),
            ("chi2_rel_tol", self.chi2_rel_tol),
            ("step_norm_tol", self.step_norm_tol),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Converged,
    Budget,
    Stalled,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptReport {
    pub iterations: usize,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub termination: Termination,
    pub wall_ms: f64,
    /// chi2 after each accepted step, starting from the initial value.
    pub chi2_trace: Vec<f64>,
}

/// One free variable block of the linear system.
#[derive(Clone, Copy, Debug)]
pub struct BlockInfo {
    pub node: NodeId,
    pub offset: usize,
    pub dim: usize,
}

/// Block-sparse normal equations over the free variables of a graph.
pub struct LinearSystem {
    pub layout: Vec<BlockInfo>,
    index: BTreeMap<NodeId, usize>,
    pub dim: usize,
    /// Upper block triangle: key `(bi, bj)` with `bi <= bj`.
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Gradient `sum J^T Omega e`.
    pub b: DVector<f64>,
}

/// Linearizes the graph at its current estimates into `(H, b)`.
///
/// Fails with [`GraphError::GaugeDeficiency`] when a free component has no
/// fixed node and no prior edge.
pub fn linearize(graph: &Graph) -> Result<LinearSystem, GraphError> {
    graph.check_gauge()?;
    let mut layout = Vec::new();
    let mut index = BTreeMap::new();
    let mut offset = 0;
    for (node, dim) in graph.free_blocks() {
        index.insert(node, layout.len());
        layout.push(BlockInfo { node, offset, dim });
        offset += dim;
    }
    let dim = offset;
    let mut sys = LinearSystem {
        layout,
        index,
        dim,
        blocks: BTreeMap::new(),
        b: DVector::zeros(dim),
    };

    for edge in graph.edges() {
        let lin = graph.edge_linearization(edge)?;
        match (&lin, edge) {
            (
                EdgeLinearization::Odometry { e, j_from, j_to },
                crate::graph::Edge::Odometry {
                    from,
                    to,
                    information,
                    ..
                },
            ) => {
                let contributions = [
                    (*from, DMatrix::from_column_slice(6, 6, j_from.as_slice())),
                    (*to, DMatrix::from_column_slice(6, 6, j_to.as_slice())),
                ];
                let omega = DMatrix::from_column_slice(6, 6, information.as_slice());
                let ev = DVector::from_column_slice(e.as_slice());
                sys.accumulate(&contributions, &omega, &ev);
            }
            (
                EdgeLinearization::DetSe3 { e, j_pose, j_lm },
                crate::graph::Edge::DetectionSe3 {
                    pose,
                    landmark,
                    information,
                    ..
                },
            ) => {
                let contributions = [
                    (*pose, DMatrix::from_column_slice(6, 6, j_pose.as_slice())),
                    (*landmark, DMatrix::from_column_slice(6, 6, j_lm.as_slice())),
                ];
                let omega = DMatrix::from_column_slice(6, 6, information.as_slice());
                let ev = DVector::from_column_slice(e.as_slice());
                sys.accumulate(&contributions, &omega, &ev);
            }
            (
                EdgeLinearization::DetPoint { e, j_pose, j_lm },
                crate::graph::Edge::DetectionPoint {
                    pose,
                    landmark,
                    information,
                    ..
                },
            ) => {
                let contributions = [
                    (*pose, DMatrix::from_column_slice(3, 6, j_pose.as_slice())),
                    (*landmark, DMatrix::from_column_slice(3, 3, j_lm.as_slice())),
                ];
                let omega = DMatrix::from_column_slice(3, 3, information.as_slice());
                let ev = DVector::from_column_slice(e.as_slice());
                sys.accumulate(&contributions, &omega, &ev);
            }
            (
                EdgeLinearization::PriorSe3 { e, j },
                crate::graph::Edge::PriorSe3 {
                    node, information, ..
                },
            ) => {
                let contributions = [(*node, DMatrix::from_column_slice(6, 6, j.as_slice()))];
                let omega = DMatrix::from_column_slice(6, 6, information.as_slice());
                let ev = DVector::from_column_slice(e.as_slice());
                sys.accumulate(&contributions, &omega, &ev);
            }
            (
                EdgeLinearization::PriorPoint { e, j },
                crate::graph::Edge::PriorPoint {
                    node, information, ..
                },
            ) => {
                let contributions = [(*node, DMatrix::from_column_slice(3, 3, j.as_slice()))];
                let omega = DMatrix::from_column_slice(3, 3, information.as_slice());
                let ev = DVector::from_column_slice(e.as_slice());
                sys.accumulate(&contributions, &omega, &ev);
            }
            _ => unreachable!("linearization variant always matches the edge kind"),
        }
    }
    Ok(sys)
}

impl LinearSystem {
    pub fn block_index(&self, node: NodeId) -> Option<usize> {
        self.index.get(&node).copied()
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.len()
    }

    /// `true` when blocks `bi` and `bj` are coupled (share an edge).
    pub fn has_block(&self, bi: usize, bj: usize) -> bool {
        let key = if bi <= bj { (bi, bj) } else { (bj, bi) };
        self.blocks.contains_key(&key)
    }

    fn accumulate<const N: usize>(
        &mut self,
        contributions: &[(NodeId, DMatrix<f64>); N],
        omega: &DMatrix<f64>,
        e: &DVector<f64>,
    ) {
        for (na, ja) in contributions {
            let Some(&bi) = self.index.get(na) else {
                continue;
            };
            let jt_omega = ja.transpose() * omega;
            let grad = &jt_omega * e;
            let off = self.layout[bi].offset;
            for r in 0..grad.len() {
                self.b[off + r] += grad[r];
            }
            for (nb, jb) in contributions {
                let Some(&bj) = self.index.get(nb) else {
                    continue;
                };
                if bj < bi {
                    continue; // stored once as the (bi <= bj) block
                }
                let h = &jt_omega * jb;
                let entry = self
                    .blocks
                    .entry((bi, bj))
                    .or_insert_with(|| DMatrix::zeros(self.layout[bi].dim, self.layout[bj].dim));
                *entry += h;
            }
        }
    }

    /// Dense symmetric H, mainly for oracles and small solves.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (&(bi, bj), m) in &self.blocks {
            let (oi, oj) = (self.layout[bi].offset, self.layout[bj].offset);
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    h[(oi + r, oj + c)] += m[(r, c)];
                    if bi != bj {
                        h[(oj + c, oi + r)] += m[(r, c)];
                    }
                }
            }
        }
        h
    }

    /// Solves `(H + lambda diag(H)) dx = -b`. Returns `None` when the
    /// damped matrix is not positive definite.
    pub fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        if self.num_blocks() < DENSE_BLOCK_THRESHOLD {
            let mut h = self.to_dense();
            for i in 0..self.dim {
                h[(i, i)] += lambda * h[(i, i)];
            }
            let chol = h.cholesky()?;
            Some(chol.solve(&(-&self.b)))
        } else {
            self.solve_sparse(lambda)
        }
    }

    fn block_adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.num_blocks()];
        for &(bi, bj) in self.blocks.keys() {
            if bi != bj {
                adj[bi].insert(bj);
                adj[bj].insert(bi);
            }
        }
        adj
    }

    fn solve_sparse(&self, lambda: f64) -> Option<DVector<f64>> {
        let order = min_degree_order(&self.block_adjacency());
        // scalar offsets of blocks in the permuted system
        let nb = self.num_blocks();
        let mut perm_offset = vec![0usize; nb];
        let mut off = 0;
        for &blk in &order {
            perm_offset[blk] = off;
            off += self.layout[blk].dim;
        }
        let mut pos_of = vec![0usize; nb];
        for (pos, &blk) in order.iter().enumerate() {
            pos_of[blk] = pos;
        }

        // scatter blocks into scalar triplets of the permuted upper
        // triangle. An off-diagonal block whose endpoints swap order under
        // the permutation contributes through its mirror, i.e. transposed.
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for (&(bi, bj), m) in &self.blocks {
            if bi == bj {
                let po = perm_offset[bi];
                for r in 0..m.nrows() {
                    for c in r..m.ncols() {
                        let v = m[(r, c)];
                        if v == 0.0 && r != c {
                            continue;
                        }
                        let damped = if r == c { v * (1.0 + lambda) } else { v };
                        triplets.push((po + r, po + c, damped));
                    }
                }
            } else {
                let flipped = pos_of[bi] > pos_of[bj];
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let v = m[(r, c)];
                        if v == 0.0 {
                            continue;
                        }
                        // entry lives at (bi + r, bj + c) and its mirror;
                        // exactly one of the two is in the upper triangle
                        let (i, j) = if flipped {
                            (perm_offset[bj] + c, perm_offset[bi] + r)
                        } else {
                            (perm_offset[bi] + r, perm_offset[bj] + c)
                        };
                        debug_assert!(i < j);
                        triplets.push((i, j, v));
                    }
                }
            }
        }

        let chol = SparseCholesky::factor(self.dim, &mut triplets)?;

        // permute rhs
        let mut rhs = DVector::zeros(self.dim);
        for (bi, blk) in self.layout.iter().enumerate() {
            let po = perm_offset[bi];
            for k in 0..blk.dim {
                rhs[po + k] = -self.b[blk.offset + k];
            }
        }
        let sol = chol.solve(&rhs);
        let mut dx = DVector::zeros(self.dim);
        for (bi, blk) in self.layout.iter().enumerate() {
            let po = perm_offset[bi];
            for k in 0..blk.dim {
                dx[blk.offset + k] = sol[po + k];
            }
        }
        Some(dx)
    }
}

/// Greedy minimum-degree elimination ordering with fill tracking.
/// Ties break on the smaller block index, keeping the ordering deterministic.
fn min_degree_order(adjacency: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj = adjacency.to_vec();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| !eliminated[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .expect("some node is still uneliminated");
        eliminated[v] = true;
        order.push(v);
        let neigh: Vec<usize> = adj[v].iter().copied().filter(|&u| !eliminated[u]).collect();
        for &u in &neigh {
            adj[u].remove(&v);
        }
        for i in 0..neigh.len() {
            for j in (i + 1)..neigh.len() {
                adj[neigh[i]].insert(neigh[j]);
                adj[neigh[j]].insert(neigh[i]);
            }
        }
    }
    order
}

/// Simplicial sparse Cholesky (LL^T) over a scalar CSC upper triangle,
/// up-looking with an elimination-tree reach, CSparse style.
struct SparseCholesky {
    n: usize,
    /// column j: first entry is the diagonal (j, l_jj), then rows > j ascending
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseCholesky {
    /// `triplets` holds the upper triangle (i <= j); duplicates are summed.
    fn factor(n: usize, triplets: &mut Vec<(usize, usize, f64)>) -> Option<SparseCholesky> {
        // CSC upper: column j holds rows i <= j sorted ascending
        triplets.sort_unstable_by_key(|&(i, j, _)| (j, i));
        let mut rows: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut cols_of: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        for &(i, j, v) in triplets.iter() {
            debug_assert!(i <= j && j < n);
            if rows.last() == Some(&i) && cols_of.last() == Some(&j) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(i);
                cols_of.push(j);
                vals.push(v);
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for &j in &cols_of {
            col_ptr[j + 1] += 1;
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }

        // elimination tree
        let mut parent = vec![usize::MAX; n];
        let mut ancestor = vec![usize::MAX; n];
        for k in 0..n {
            for p in col_ptr[k]..col_ptr[k + 1] {
                let mut i = rows[p];
                while i != usize::MAX && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == usize::MAX {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut x = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut path = Vec::with_capacity(n);
        let mut pattern = Vec::with_capacity(n);

        for k in 0..n {
            // reach: pattern of row k of L in topological etree order
            pattern.clear();
            mark[k] = k;
            for p in col_ptr[k]..col_ptr[k + 1] {
                let mut i = rows[p];
                if i > k {
                    continue;
                }
                path.clear();
                while mark[i] != k {
                    path.push(i);
                    mark[i] = k;
                    i = parent[i];
                    if i == usize::MAX {
                        break;
                    }
                }
                for &node in path.iter().rev() {
                    pattern.push(node);
                }
            }
            pattern.sort_unstable();

            // scatter column k of A (upper)
            for p in col_ptr[k]..col_ptr[k + 1] {
                if rows[p] <= k {
                    x[rows[p]] = vals[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;

            for &j in &pattern {
                let ljj = cols[j][0].1;
                let lkj = x[j] / ljj;
                x[j] = 0.0;
                for &(i, lij) in &cols[j][1..] {
                    x[i] -= lij * lkj;
                }
                d -= lkj * lkj;
                cols[j].push((k, lkj));
            }
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            cols[k].push((k, d.sqrt()));
        }
        Some(SparseCholesky { n, cols })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut z = b.clone();
        for j in 0..self.n {
            let zj = z[j] / self.cols[j][0].1;
            z[j] = zj;
            for &(i, lij) in &self.cols[j][1..] {
                z[i] -= lij * zj;
            }
        }
        let mut y = z;
        for j in (0..self.n).rev() {
            let mut s = y[j];
            for &(i, lij) in &self.cols[j][1..] {
                s -= lij * y[i];
            }
            y[j] = s / self.cols[j][0].1;
        }
        y
    }
}

/// Snapshot of the free-node estimates, for LM step rollback.
enum SavedEstimate {
    Pose(NodeId, Pose),
    Landmark(NodeId, LandmarkEstimate),
}

fn save_estimates(graph: &Graph) -> Vec<SavedEstimate> {
    graph
        .nodes()
        .filter(|n| !n.fixed())
        .map(|n| match n {
            Node::Pose(p) => SavedEstimate::Pose(p.id, p.estimate),
            Node::Landmark(l) => SavedEstimate::Landmark(l.id, l.estimate),
        })
        .collect()
}

fn restore_estimates(graph: &mut Graph, saved: &[SavedEstimate]) {
    for s in saved {
        match s {
            SavedEstimate::Pose(id, p) => graph.set_pose_estimate(*id, *p).unwrap(),
            SavedEstimate::Landmark(id, l) => graph.set_landmark_estimate(*id, *l).unwrap(),
        }
    }
}

/// Applies the right-perturbation update `X <- X exp(dx)` blockwise.
fn apply_step(graph: &mut Graph, layout: &[BlockInfo], dx: &DVector<f64>) {
    for blk in layout {
        let seg = dx.rows(blk.offset, blk.dim);
        match graph.node(blk.node).expect("layout nodes exist") {
            Node::Pose(p) => {
                let xi = Twist::from_vector(&nalgebra::Vector6::from_column_slice(seg.as_slice()));
                let updated = p.estimate * Pose::exp(&xi);
                graph.set_pose_estimate(blk.node, updated).unwrap();
            }
            Node::Landmark(l) => match l.estimate {
                LandmarkEstimate::Se3(p) => {
                    let xi =
                        Twist::from_vector(&nalgebra::Vector6::from_column_slice(seg.as_slice()));
                    graph
                        .set_landmark_estimate(blk.node, LandmarkEstimate::Se3(p * Pose::exp(&xi)))
                        .unwrap();
                }
                LandmarkEstimate::Point(p) => {
                    let d = nalgebra::Vector3::from_column_slice(seg.as_slice());
                    graph
                        .set_landmark_estimate(blk.node, LandmarkEstimate::Point(p + d))
                        .unwrap();
                }
            },
        }
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn wall_clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn wall_clock() -> Option<std::time::Instant> {
    None
}

/// Maximum consecutive rejected steps (lambda increases) before reporting a
/// stall.
const MAX_REJECTS: usize = 10;

/// Runs Levenberg-Marquardt on the graph in place.
///
/// chi2 is non-increasing across accepted steps; on a stall the estimates
/// are left at the best accepted state.
pub fn optimize(graph: &mut Graph, config: &SolverConfig) -> Result<OptReport, GraphError> {
    let start = wall_clock();
    let mut chi2 = graph.chi2();
    let initial_chi2 = chi2;
    let mut trace = vec![chi2];
    let mut lambda = config.lambda_init;
    let mut termination = Termination::Budget;
    let mut iterations = 0;

    'outer: for _ in 0..config.max_iterations {
        iterations += 1;
        let sys = linearize(graph)?;
        if sys.dim == 0 {
            termination = Termination::Converged;
            break;
        }
        if sys.b.amax() < 1e-16 {
            termination = Termination::Converged;
            break;
        }
        let saved = save_estimates(graph);
        let mut accepted = false;
        for _ in 0..MAX_REJECTS {
            match sys.solve(lambda) {
                Some(dx) if dx.iter().all(|v| v.is_finite()) => {
                    apply_step(graph, &sys.layout, &dx);
                    let new_chi2 = graph.chi2();
                    if new_chi2 < chi2 {
                        let rel_drop = (chi2 - new_chi2) / chi2.max(f64::MIN_POSITIVE);
                        chi2 = new_chi2;
                        trace.push(chi2);
                        lambda *= config.lambda_down;
                        accepted = true;
                        if rel_drop < config.chi2_rel_tol || dx.norm() < config.step_norm_tol {
                            termination = Termination::Converged;
                            break 'outer;
                        }
                        break;
                    } else {
                        restore_estimates(graph, &saved);
                        lambda *= config.lambda_up;
                    }
                }
                _ => {
                    lambda *= config.lambda_up;
                }
            }
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
    }

    Ok(OptReport {
        iterations,
        initial_chi2,
        final_chi2: chi2,
        termination,
        wall_ms: start
            .map(|t| t.elapsed().as_secs_f64() * 1e3)
            .unwrap_or(0.0),
        chi2_trace: trace,
    })
}

/// Marginal information of a landmark: the Schur complement of its block in
/// the free-variable normal equations, `H_ll - H_lx H_xx^-1 H_xl`.
pub fn marginal_information(graph: &Graph, landmark: NodeId) -> Result<DMatrix<f64>, GraphError> {
    graph.landmark(landmark)?;
    let sys = linearize(graph)?;
    let li = sys
        .block_index(landmark)
        .ok_or(GraphError::NotFree(landmark))?;
    let lblk = sys.layout[li];
    let h = sys.to_dense();
    let others: Vec<usize> = (0..sys.dim)
        .filter(|&i| i < lblk.offset || i >= lblk.offset + lblk.dim)
        .collect();
    let h_ll = h
        .view((lblk.offset, lblk.offset), (lblk.dim, lblk.dim))
        .into_owned();
    if others.is_empty() {
        return Ok(h_ll);
    }
    let nx = others.len();
    let mut h_xx = DMatrix::zeros(nx, nx);
    let mut h_xl = DMatrix::zeros(nx, lblk.dim);
    for (r, &i) in others.iter().enumerate() {
        for (c, &j) in others.iter().enumerate() {
            h_xx[(r, c)] = h[(i, j)];
        }
        for c in 0..lblk.dim {
            h_xl[(r, c)] = h[(i, lblk.offset + c)];
        }
    }
    let chol = h_xx
        .cholesky()
        .ok_or(GraphError::GaugeDeficiency(landmark))?;
    let y = chol.solve(&h_xl);
    let mut s = h_ll - h_xl.transpose() * y;
    // symmetrize away round-off
    let st = s.transpose();
    s = (s + st) * 0.5;
    Ok(s)
}
