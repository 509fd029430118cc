use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AveragingError, AveragingProblem, UnionFind};
use crate::geometry::{rotation, Rotation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationConfig {
    /// Huber width on the edge residual angle (radians).
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the largest per-node update (radians).
    pub tolerance: f64,
    /// Randomized spanning trees tried for initialization, besides the
    /// maximum-weight tree and breadth-first trees from every node.
    pub random_trees: usize,
    pub seed: u64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self { huber_delta: 0.1, max_iterations: 100, tolerance: 1e-8, random_trees: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEstimateSet {
    /// Global rotation per node; node 0 is the identity.
    pub rotations: Vec<Rotation>,
    /// Final residual angle per edge (radians), in problem edge order.
    pub edge_residuals: Vec<f64>,
    /// Robust objective after initialization and after every iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl RotationEstimateSet {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history starts with the initial objective")
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn edge_error(p: &AveragingProblem, k: usize, rots: &[Rotation]) -> Vector3<f64> {
    let e = &p.edges[k];
    rotation::log(&(e.rotation.inverse() * rots[e.j] * rots[e.i].inverse()))
}

/// Weighted Huber objective over edge residual angles.
pub fn robust_objective(p: &AveragingProblem, rots: &[Rotation], delta: f64) -> f64 {
    (0..p.edges.len()).map(|k| p.edges[k].weight * huber(edge_error(p, k, rots).norm(), delta)).sum()
}

fn tree_rotations(p: &AveragingProblem, tree: &[usize]) -> Vec<Rotation> {
    let mut adj = vec![Vec::new(); p.n_nodes];
    for &k in tree {
        adj[p.edges[k].i].push(k);
        adj[p.edges[k].j].push(k);
    }
    let mut rots: Vec<Option<Rotation>> = vec![None; p.n_nodes];
    rots[0] = Some(Rotation::identity());
    let mut queue = VecDeque::from([0]);
    while let Some(n) = queue.pop_front() {
        let rn = rots[n].expect("visited");
        for &k in &adj[n] {
            let e = &p.edges[k];
            let (other, r) = if e.i == n { (e.j, e.rotation * rn) } else { (e.i, e.rotation.inverse() * rn) };
            if rots[other].is_none() {
                rots[other] = Some(r);
                queue.push_back(other);
            }
        }
    }
    rots.into_iter().map(|r| r.expect("spanning tree reaches every node")).collect()
}

fn kruskal(p: &AveragingProblem, order: &[usize]) -> Vec<usize> {
    let mut uf = UnionFind::new(p.n_nodes);
    order.iter().copied().filter(|&k| uf.union(p.edges[k].i, p.edges[k].j)).collect()
}

fn bfs_tree(p: &AveragingProblem, root: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); p.n_nodes];
    for (k, e) in p.edges.iter().enumerate() {
        adj[e.i].push(k);
        adj[e.j].push(k);
    }
    let mut seen = vec![false; p.n_nodes];
    seen[root] = true;
    let mut tree = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        for &k in &adj[n] {
            let other = if p.edges[k].i == n { p.edges[k].j } else { p.edges[k].i };
            if !seen[other] {
                seen[other] = true;
                tree.push(k);
                queue.push_back(other);
            }
        }
    }
    tree
}

fn initialize(p: &AveragingProblem, cfg: &RotationConfig) -> Vec<Rotation> {
    let mut by_weight: Vec<usize> = (0..p.edges.len()).collect();
    by_weight.sort_by(|&a, &b| p.edges[b].weight.total_cmp(&p.edges[a].weight).then(a.cmp(&b)));
    let mut trees = vec![kruskal(p, &by_weight)];
    trees.extend((0..p.n_nodes).map(|root| bfs_tree(p, root)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.random_trees {
        let mut order: Vec<usize> = (0..p.edges.len()).collect();
        order.shuffle(&mut rng);
        trees.push(kruskal(p, &order));
    }
    let mut best: Option<(f64, Vec<Rotation>)> = None;
    for tree in trees {
        let rots = tree_rotations(p, &tree);
        let obj = robust_objective(p, &rots, cfg.huber_delta);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, rots));
        }
    }
    best.expect("at least one tree").1
}

fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = rotation::skew(phi);
    let c = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * k + c * k * k
}

fn apply(rots: &[Rotation], delta: &DVector<f64>, scale: f64) -> Vec<Rotation> {
    let mut out = rots.to_vec();
    for (n, r) in out.iter_mut().enumerate().skip(1) {
        let d = Vector3::new(delta[3 * (n - 1)], delta[3 * (n - 1) + 1], delta[3 * (n - 1) + 2]) * scale;
        *r *= rotation::exp(&d);
    }
    out
}

/// Robust rotation averaging, gauge fixed at node 0.
pub fn average_rotations(p: &AveragingProblem, cfg: &RotationConfig) -> Result<RotationEstimateSet, AveragingError> {
    if p.n_nodes == 0 {
        return Err(AveragingError::Empty);
    }
    let mut uf = UnionFind::new(p.n_nodes);
    let joined = p.edges.iter().filter(|e| uf.union(e.i, e.j)).count();
    if joined + 1 != p.n_nodes {
        return Err(AveragingError::Disconnected);
    }

    let mut rots = initialize(p, cfg);
    let mut objective = robust_objective(p, &rots, cfg.huber_delta);
    let mut history = vec![objective];
    let mut converged = p.n_nodes == 1;
    let mut iterations = 0;
    let dim = 3 * (p.n_nodes - 1);

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (k, e) in p.edges.iter().enumerate() {
            let err = edge_error(p, k, &rots);
            let angle = err.norm();
            let w = e.weight * if angle > cfg.huber_delta { cfg.huber_delta / angle } else { 1.0 };
            // Linearized residual: err + Jr^-1(err) R_i (delta_j - delta_i).
            let ri = right_jacobian_inv(&err) * rots[e.i].matrix();
            let blocks = [(e.i, -ri), (e.j, ri)];
            for (a, ja) in blocks {
                if a == 0 {
                    continue;
                }
                let oa = 3 * (a - 1);
                let jtr = ja.transpose() * err * w;
                for r in 0..3 {
                    g[oa + r] -= jtr[r];
                }
                for (b, jb) in blocks {
                    if b == 0 {
                        continue;
                    }
                    let ob = 3 * (b - 1);
                    let jtj = ja.transpose() * jb * w;
                    let mut blk = h.fixed_view_mut::<3, 3>(oa, ob);
                    blk += jtj;
                }
            }
        }
        let Some(delta) = h.clone().cholesky().map(|c| c.solve(&g)).or_else(|| h.lu().solve(&g)) else {
            break;
        };
        let max_update = (0..p.n_nodes - 1)
            .map(|n| Vector3::new(delta[3 * n], delta[3 * n + 1], delta[3 * n + 2]).norm())
            .fold(0.0, f64::max);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = apply(&rots, &delta, step);
            let obj = robust_objective(p, &cand, cfg.huber_delta);
            if obj <= objective {
                accepted = Some((cand, obj));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, obj)) => {
                rots = cand;
                objective = obj;
                history.push(obj);
                if max_update * step < cfg.tolerance {
                    converged = true;
                }
            }
            None => {
                // No descent along the reweighted direction: a fixed point.
                converged = true;
            }
        }
    }
    let edge_residuals = (0..p.edges.len()).map(|k| edge_error(p, k, &rots).norm()).collect();
    Ok(RotationEstimateSet { rotations: rots, edge_residuals, objective_history: history, iterations, converged })
}
