//! Levenberg-Marquardt over camera-side parameter blocks with the 3D points
//! eliminated through the Schur complement.

use nalgebra::{DMatrix, DVector, Dyn, Matrix2x3, Matrix3, OMatrix, Vector2, Vector3, U2};

use super::{BaConfig, BundleError};

pub(crate) type BlockJacobian = OMatrix<f64, U2, Dyn>;

pub(crate) struct Linearization {
    pub residual: Vector2<f64>,
    pub d_point: Matrix2x3<f64>,
    pub blocks: Vec<(usize, BlockJacobian)>,
}

pub(crate) trait SchurProblem: Clone {
    fn block_sizes(&self) -> Vec<usize>;
    fn num_points(&self) -> usize;
    /// Observation indices grouped by point.
    fn point_observations(&self) -> &[Vec<usize>];
    fn num_observations(&self) -> usize;
    fn residual(&self, obs: usize) -> Option<Vector2<f64>>;
    fn linearize(&self, obs: usize) -> Option<Linearization>;
    fn apply(&mut self, blocks: &[DVector<f64>], points: &[Vector3<f64>]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Robust cost at the start and after every accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmSummary {
    /// Accepted steps all strictly decreased the robust cost.
    pub fn is_monotone(&self) -> bool {
        self.cost_history.windows(2).all(|w| w[1] < w[0])
    }
}

pub(crate) fn huber_cost(r: &Vector2<f64>, delta: f64) -> f64 {
    let n = r.norm();
    if n <= delta {
        0.5 * n * n
    } else {
        delta * (n - 0.5 * delta)
    }
}

fn huber_weight(r: &Vector2<f64>, delta: f64) -> f64 {
    let n = r.norm();
    if n <= delta {
        1.0
    } else {
        delta / n
    }
}

/// Penalty for an observation whose point left the camera's front.
const INVALID_RESIDUAL: f64 = 1e6;

pub(crate) fn robust_cost<P: SchurProblem>(p: &P, delta: f64) -> f64 {
    (0..p.num_observations())
        .map(|k| match p.residual(k) {
            Some(r) => huber_cost(&r, delta),
            None => delta * (INVALID_RESIDUAL - 0.5 * delta),
        })
        .sum()
}

struct PointSystem {
    v: Matrix3<f64>,
    b: Vector3<f64>,
    /// `(block, J_b^T W J_p)` for every block seen with this point.
    w: Vec<(usize, DMatrix<f64>)>,
}

struct NormalEquations {
    u: DMatrix<f64>,
    b: DVector<f64>,
    points: Vec<PointSystem>,
    gradient_max: f64,
}

fn assemble<P: SchurProblem>(p: &P, offsets: &[usize], sizes: &[usize], delta: f64) -> NormalEquations {
    let n = offsets.last().copied().unwrap_or(0) + sizes.last().copied().unwrap_or(0);
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut points = Vec::with_capacity(p.num_points());
    for obs in p.point_observations() {
        let mut ps = PointSystem { v: Matrix3::zeros(), b: Vector3::zeros(), w: Vec::new() };
        for &k in obs {
            let Some(lin) = p.linearize(k) else { continue };
            let wt = huber_weight(&lin.residual, delta);
            let jp = lin.d_point;
            ps.v += jp.transpose() * jp * wt;
            ps.b -= jp.transpose() * lin.residual * wt;
            for (bi, ji) in &lin.blocks {
                let (oi, si) = (offsets[*bi], sizes[*bi]);
                let g = ji.transpose() * lin.residual * wt;
                for r in 0..si {
                    b[oi + r] -= g[r];
                }
                for (bj, jj) in &lin.blocks {
                    let prod = ji.transpose() * jj * wt;
                    let mut view = u.view_mut((oi, offsets[*bj]), (si, sizes[*bj]));
                    view += prod;
                }
                let wp = ji.transpose() * jp * wt;
                match ps.w.iter_mut().find(|(blk, _)| blk == bi) {
                    Some((_, m)) => *m += wp,
                    None => ps.w.push((*bi, DMatrix::from_iterator(si, 3, wp.iter().copied()))),
                }
            }
        }
        points.push(ps);
    }
    let gradient_max = b.amax().max(points.iter().map(|p| p.b.amax()).fold(0.0, f64::max));
    NormalEquations { u, b, points, gradient_max }
}

/// Damped solve; `None` when the reduced system is not positive definite.
fn solve(ne: &NormalEquations, offsets: &[usize], lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = ne.u.nrows();
    let mut s = ne.u.clone();
    for d in 0..n {
        s[(d, d)] += lambda * ne.u[(d, d)].max(1e-9);
    }
    let mut rhs = ne.b.clone();
    let mut vinv = Vec::with_capacity(ne.points.len());
    for ps in &ne.points {
        let mut v = ps.v;
        for d in 0..3 {
            v[(d, d)] += lambda * ps.v[(d, d)].max(1e-9);
        }
        let inv = v.cholesky()?.inverse();
        for (bi, wi) in &ps.w {
            let wv = wi * inv;
            let oi = offsets[*bi];
            let g = &wv * ps.b;
            for r in 0..g.nrows() {
                rhs[oi + r] -= g[r];
            }
            for (bj, wj) in &ps.w {
                let prod = &wv * wj.transpose();
                let mut view = s.view_mut((oi, offsets[*bj]), (wi.nrows(), wj.nrows()));
                view -= prod;
            }
        }
        vinv.push(inv);
    }
    let dx = if n > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let dp = ne
        .points
        .iter()
        .zip(&vinv)
        .map(|(ps, inv)| {
            let mut r = ps.b;
            for (bi, wi) in &ps.w {
                r -= wi.transpose() * dx.rows(offsets[*bi], wi.nrows());
            }
            inv * r
        })
        .collect();
    Some((dx, dp))
}

pub(crate) fn levenberg_marquardt<P: SchurProblem>(problem: &mut P, cfg: &BaConfig) -> Result<LmSummary, BundleError> {
    let sizes = problem.block_sizes();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        offsets.push(acc);
        acc += s;
    }
    let delta = cfg.huber_px;
    let mut cost = robust_cost(problem, delta);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.damping_init;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iterations {
        if cost <= 1e-30 {
            converged = true;
            break;
        }
        iterations += 1;
        let ne = assemble(problem, &offsets, &sizes, delta);
        if ne.gradient_max <= 1e-14 {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut any_solved = false;
        while lambda < 1e16 {
            let Some((dx, dp)) = solve(&ne, &offsets, lambda) else {
                lambda *= 10.0;
                continue;
            };
            any_solved = true;
            let blocks: Vec<DVector<f64>> =
                offsets.iter().zip(&sizes).map(|(&o, &s)| dx.rows(o, s).into_owned()).collect();
            let mut candidate = problem.clone();
            candidate.apply(&blocks, &dp);
            let new_cost = robust_cost(&candidate, delta);
            if new_cost < cost {
                let step_max = dx.amax().max(dp.iter().map(|v| v.amax()).fold(0.0, f64::max));
                let decrease = cost - new_cost;
                *problem = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if decrease <= cfg.function_tolerance * cost || step_max <= cfg.parameter_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !any_solved {
            return Err(BundleError::SingularNormalEquations);
        }
        if !accepted || converged {
            // No descent at any damping: a local minimum to working precision.
            converged = true;
            break;
        }
    }
    Ok(LmSummary { initial_cost, final_cost: cost, cost_history: history, iterations, converged })
}
