use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Unit, Vector3};

use super::{AveragingError, AveragingProblem, RotationEstimateSet, UnionFind};
use crate::geometry::{rotation::skew, CameraIntrinsics};
use crate::tracking::TrackId;
use crate::viewgraph::Keyframe;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationConfig {
    /// Huber width on the chordal distance between unit directions.
    pub huber_delta: f64,
    /// Weight of camera-point rays relative to camera-camera edges.
    pub point_weight: f64,
    pub max_iterations: usize,
    /// Singular values below this fraction of the largest count as null.
    pub nullspace_tol: f64,
    /// Number of longest tracks used as pseudo-nodes.
    pub k_tracks: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self { huber_delta: 0.01, point_weight: 0.5, max_iterations: 100, nullspace_tol: 1e-9, k_tracks: 50 }
    }
}

/// Global-frame unit rays from cameras towards one tracked point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrackConstraint {
    pub track: TrackId,
    pub rays: Vec<(usize, Unit<Vector3<f64>>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimateSet {
    /// Camera centers; node 0 at the origin, mean pairwise distance 1.
    pub positions: Vec<Vector3<f64>>,
    /// Camera centers from the linear stage alone, same gauge convention.
    pub linear_positions: Vec<Vector3<f64>>,
    /// Pseudo-point positions in the same gauge, one per constraint.
    pub points: Vec<Vector3<f64>>,
    /// Robust chordal objective after the linear stage and every accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Rays towards the `k_tracks` longest tracks seen by at least three keyframes.
pub fn build_camera_point_constraints(
    keyframes: &[Keyframe],
    rotations: &RotationEstimateSet,
    intr: &CameraIntrinsics,
    k_tracks: usize,
) -> Vec<PointTrackConstraint> {
    let mut per_track: BTreeMap<TrackId, Vec<(usize, Unit<Vector3<f64>>)>> = BTreeMap::new();
    for (pos, kf) in keyframes.iter().enumerate() {
        let rt = rotations.rotations[pos].inverse();
        for (id, pixel) in &kf.observations {
            let x = intr.correct(pixel);
            per_track.entry(*id).or_default().push((pos, Unit::new_normalize(rt * Vector3::new(x.x, x.y, 1.0))));
        }
    }
    let mut tracks: Vec<PointTrackConstraint> = per_track
        .into_iter()
        .filter(|(_, rays)| rays.len() >= 3)
        .map(|(track, rays)| PointTrackConstraint { track, rays })
        .collect();
    tracks.sort_by(|a, b| b.rays.len().cmp(&a.rays.len()).then(a.track.cmp(&b.track)));
    tracks.truncate(k_tracks);
    tracks
}

/// `direction ~ (x[a] - x[b]) / |x[a] - x[b]|`.
struct Direction {
    a: usize,
    b: usize,
    d: Vector3<f64>,
    w: f64,
}

fn directions(
    p: &AveragingProblem,
    rotations: &RotationEstimateSet,
    points: &[PointTrackConstraint],
    point_weight: f64,
) -> Vec<Direction> {
    let mut out: Vec<Direction> = p
        .edges
        .iter()
        .filter(|e| e.translation_reliable)
        .map(|e| Direction {
            a: e.i,
            b: e.j,
            d: rotations.rotations[e.j].inverse() * e.direction.into_inner(),
            w: e.weight,
        })
        .collect();
    for (k, pt) in points.iter().enumerate() {
        if pt.rays.len() < 2 {
            continue;
        }
        for (cam, ray) in &pt.rays {
            out.push(Direction { a: p.n_nodes + k, b: *cam, d: ray.into_inner(), w: point_weight });
        }
    }
    out
}

fn linear_system(dirs: &[Direction], n_vars: usize) -> DMatrix<f64> {
    let cols = 3 * (n_vars - 1);
    let mut a = DMatrix::<f64>::zeros(3 * dirs.len(), cols);
    for (r, dir) in dirs.iter().enumerate() {
        let m: Matrix3<f64> = skew(&dir.d) * dir.w.sqrt();
        for (var, sign) in [(dir.a, 1.0), (dir.b, -1.0)] {
            if var == 0 {
                continue;
            }
            let mut blk = a.fixed_view_mut::<3, 3>(3 * r, 3 * (var - 1));
            blk += m * sign;
        }
    }
    a
}

/// Singular values of the reduced linear system and the right singular vector
/// of the smallest one.
fn reduced_spectrum(a: &DMatrix<f64>) -> (Vec<f64>, Option<DVector<f64>>) {
    let cols = a.ncols();
    let r = if a.nrows() > cols { a.clone().qr().r() } else { a.clone() };
    let svd = r.svd(false, true);
    let mut values: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    values.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut sv: Vec<f64> = values.iter().map(|v| v.0).collect();
    sv.splice(0..0, std::iter::repeat_n(0.0, cols.saturating_sub(sv.len())));
    let v = svd.v_t.as_ref().map(|vt| vt.row(values[0].1).transpose());
    (sv, v)
}

fn nullity(sv: &[f64], tol: f64) -> usize {
    let max = sv.iter().copied().fold(0.0, f64::max);
    // Three translational directions are removed by pinning node 0.
    3 + sv.iter().filter(|&&s| s <= tol * max || max == 0.0).count()
}

/// Nullspace dimension of the linear direction system (4 when well posed).
pub fn linear_nullity(
    p: &AveragingProblem,
    rotations: &RotationEstimateSet,
    points: &[PointTrackConstraint],
    cfg: &TranslationConfig,
) -> usize {
    let n_vars = p.n_nodes + points.len();
    let dirs = directions(p, rotations, points, cfg.point_weight);
    if dirs.is_empty() || n_vars < 2 {
        return 3 * n_vars.max(1) + 1;
    }
    nullity(&reduced_spectrum(&linear_system(&dirs, n_vars)).0, cfg.nullspace_tol)
}

fn robust_cost(dirs: &[Direction], x: &[Vector3<f64>], delta: f64) -> f64 {
    dirs.iter()
        .map(|c| {
            let v = x[c.a] - x[c.b];
            let n = v.norm();
            let e = if n > 0.0 { (c.d - v / n).norm() } else { 1.0 };
            c.w * super::huber(e, delta)
        })
        .sum()
}

fn refine(dirs: &[Direction], x: &mut [Vector3<f64>], cfg: &TranslationConfig, history: &mut Vec<f64>) -> (usize, bool) {
    let dim = 3 * (x.len() - 1);
    let mut cost = robust_cost(dirs, x, cfg.huber_delta);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if cost < 1e-28 {
            return (iterations, true);
        }
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for c in dirs {
            let v = x[c.a] - x[c.b];
            let len = v.norm();
            if len == 0.0 {
                continue;
            }
            let n = v / len;
            let e = c.d - n;
            let en = e.norm();
            let w = c.w * if en > cfg.huber_delta { cfg.huber_delta / en } else { 1.0 };
            let j = (Matrix3::identity() - n * n.transpose()) / len;
            let blocks = [(c.a, -j), (c.b, j)];
            for (va, ja) in blocks {
                if va == 0 {
                    continue;
                }
                let oa = 3 * (va - 1);
                let jte = ja.transpose() * e * w;
                for r in 0..3 {
                    g[oa + r] -= jte[r];
                }
                for (vb, jb) in blocks {
                    if vb == 0 {
                        continue;
                    }
                    let mut blk = h.fixed_view_mut::<3, 3>(oa, 3 * (vb - 1));
                    blk += ja.transpose() * jb * w;
                }
            }
        }
        if g.amax() < 1e-15 {
            return (iterations, true);
        }
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&g);
            let mut cand = x.to_vec();
            for (k, c) in cand.iter_mut().enumerate().skip(1) {
                *c += Vector3::new(step[3 * (k - 1)], step[3 * (k - 1) + 1], step[3 * (k - 1) + 2]);
            }
            let new_cost = robust_cost(dirs, &cand, cfg.huber_delta);
            if new_cost < cost {
                let decrease = cost - new_cost;
                x.copy_from_slice(&cand);
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if decrease <= 1e-12 * cost || step.amax() < 1e-14 {
                    return (iterations, true);
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            return (iterations, true);
        }
    }
    (iterations, false)
}

fn normalize_gauge(x: &mut [Vector3<f64>], n_cams: usize) {
    let origin = x[0];
    for v in x.iter_mut() {
        *v -= origin;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n_cams {
        for j in i + 1..n_cams {
            total += (x[i] - x[j]).norm();
            pairs += 1;
        }
    }
    let mean = total / pairs.max(1) as f64;
    if mean > 0.0 {
        for v in x.iter_mut() {
            *v /= mean;
        }
    }
}

/// Global camera positions from translation directions and point rays.
pub fn average_translations(
    p: &AveragingProblem,
    rotations: &RotationEstimateSet,
    points: &[PointTrackConstraint],
    cfg: &TranslationConfig,
) -> Result<PositionEstimateSet, AveragingError> {
    if p.n_nodes < 2 {
        return Err(AveragingError::Empty);
    }
    let n_vars = p.n_nodes + points.len();
    let dirs = directions(p, rotations, points, cfg.point_weight);
    let mut uf = UnionFind::new(n_vars);
    for d in &dirs {
        uf.union(d.a, d.b);
    }
    if (1..p.n_nodes).any(|k| uf.find(k) != uf.find(0)) {
        return Err(AveragingError::Disconnected);
    }
    let a = linear_system(&dirs, n_vars);
    let (sv, v) = reduced_spectrum(&a);
    let dim = nullity(&sv, cfg.nullspace_tol);
    if dim > 4 {
        return Err(AveragingError::Underconstrained(dim));
    }
    let v = v.ok_or(AveragingError::Underconstrained(dim))?;
    let mut x = vec![Vector3::zeros(); n_vars];
    for (k, xk) in x.iter_mut().enumerate().skip(1) {
        *xk = Vector3::new(v[3 * (k - 1)], v[3 * (k - 1) + 1], v[3 * (k - 1) + 2]);
    }
    // The null vector's sign is arbitrary; pick the one agreeing with most rays.
    let agreement: f64 = dirs.iter().map(|d| d.w * d.d.dot(&(x[d.a] - x[d.b])).signum()).sum();
    if agreement < 0.0 {
        for xk in x.iter_mut() {
            *xk = -*xk;
        }
    }
    normalize_gauge(&mut x, p.n_nodes);
    let linear_positions = x[..p.n_nodes].to_vec();
    let mut history = vec![robust_cost(&dirs, &x, cfg.huber_delta)];
    let (iterations, converged) = refine(&dirs, &mut x, cfg, &mut history);
    normalize_gauge(&mut x, p.n_nodes);
    let points_out = x.split_off(p.n_nodes);
    Ok(PositionEstimateSet {
        positions: x,
        linear_positions,
        points: points_out,
        cost_history: history,
        iterations,
        converged,
    })
}
