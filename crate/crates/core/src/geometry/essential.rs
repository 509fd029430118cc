//! Essential matrix estimation, decomposition and robust relative pose.

use nalgebra::{DMatrix, Matrix2, Matrix3, Unit, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::five_point;
use super::rotation::{skew, Rotation};
use super::GeometryError;

/// A normalized (intrinsics-removed) correspondence, `b^T E a = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

impl Correspondence {
    pub fn new(a: Vector2<f64>, b: Vector2<f64>) -> Self {
        Self { a, b }
    }
}

/// Essential matrix, defined up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    /// `E = [t]x R` for the motion `x_b = R x_a + t`.
    pub fn from_motion(rotation: &Rotation, translation: &Vector3<f64>) -> Self {
        Self(skew(translation) * rotation.matrix())
    }

    /// Closest matrix with singular values `(1, 1, 0)`.
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        Self(u * d * v_t)
    }

    pub fn singular_values(&self) -> Vector3<f64> {
        let mut s = self.0.svd(false, false).singular_values;
        s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Squared Sampson distance of a correspondence.
    pub fn sampson_sq(&self, c: &Correspondence) -> f64 {
        let a = Vector3::new(c.a.x, c.a.y, 1.0);
        let b = Vector3::new(c.b.x, c.b.y, 1.0);
        let ea = self.0 * a;
        let etb = self.0.transpose() * b;
        let num = b.dot(&ea);
        let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
        if den <= f64::MIN_POSITIVE {
            return if num == 0.0 { 0.0 } else { f64::INFINITY };
        }
        num * num / den
    }
}

/// One of the four motions encoded by an essential matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseCandidate {
    pub rotation: Rotation,
    pub direction: Unit<Vector3<f64>>,
    /// Correspondences triangulating in front of both cameras.
    pub positive_depth: usize,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub candidates: [PoseCandidate; 4],
    pub winner: usize,
}

impl Decomposition {
    pub fn best(&self) -> &PoseCandidate {
        &self.candidates[self.winner]
    }
}

/// Depths `(d_a, d_b)` with `d_b b = d_a R a + t`, least squares.
fn two_view_depths(rotation: &Rotation, t: &Vector3<f64>, c: &Correspondence) -> Option<(f64, f64)> {
    let ra = rotation * Vector3::new(c.a.x, c.a.y, 1.0);
    let b = Vector3::new(c.b.x, c.b.y, 1.0);
    // [ra, -b] [da; db] = -t
    let m = Matrix2::new(ra.dot(&ra), -ra.dot(&b), -ra.dot(&b), b.dot(&b));
    let rhs = Vector2::new(-ra.dot(t), b.dot(t));
    let inv = m.try_inverse()?;
    let d = inv * rhs;
    Some((d.x, d.y))
}

fn count_in_front(rotation: &Rotation, t: &Vector3<f64>, corrs: &[Correspondence]) -> usize {
    corrs
        .iter()
        .filter(|c| matches!(two_view_depths(rotation, t, c), Some((da, db)) if da > 0.0 && db > 0.0))
        .count()
}

/// The four `(R, t)` candidates and the cheirality winner.
pub fn decompose_essential(e: &EssentialMatrix, corrs: &[Correspondence]) -> Result<Decomposition, GeometryError> {
    let svd = e.0.svd(true, true);
    let mut u = svd.u.expect("svd u");
    let mut v_t = svd.v_t.expect("svd v_t");
    // nalgebra does not sort singular values; move the smallest one last.
    let s = svd.singular_values;
    let imin = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).expect("3 values");
    if imin != 2 {
        u.swap_columns(imin, 2);
        v_t.swap_rows(imin, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let ra = Rotation::from_matrix_unchecked(u * w * v_t);
    let rb = Rotation::from_matrix_unchecked(u * w.transpose() * v_t);
    let t = u.column(2).into_owned().normalize();

    let make = |r: Rotation, t: Vector3<f64>| PoseCandidate {
        rotation: r,
        direction: Unit::new_normalize(t),
        positive_depth: count_in_front(&r, &t, corrs),
    };
    let candidates = [make(ra, t), make(ra, -t), make(rb, t), make(rb, -t)];
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| candidates[j].positive_depth.cmp(&candidates[i].positive_depth));
    if candidates[order[0]].positive_depth == candidates[order[1]].positive_depth {
        return Err(GeometryError::CheiralityTie(Box::new(candidates)));
    }
    Ok(Decomposition { candidates, winner: order[0] })
}

/// Isotropic normalization: centroid to origin, mean distance sqrt(2).
fn normalizing_transform(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let centroid = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-15 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

fn apply_h(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized eight-point algorithm, projected onto the essential manifold.
/// Returns `None` when the constraint matrix has a nullspace larger than one.
pub fn eight_point(corrs: &[Correspondence]) -> Option<EssentialMatrix> {
    if corrs.len() < 8 {
        return None;
    }
    let ta = normalizing_transform(corrs.iter().map(|c| c.a));
    let tb = normalizing_transform(corrs.iter().map(|c| c.b));
    let rows = corrs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corrs.iter().enumerate() {
        let row = five_point::epipolar_row(&apply_h(&ta, &c.a), &apply_h(&tb, &c.b));
        for (k, v) in row.iter().enumerate() {
            a[(i, k)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let s_max = s[order[0]];
    if s_max <= 0.0 || s[order[7]] < 1e-10 * s_max {
        return None;
    }
    let e = v_t.row(order[8]);
    let e_hat = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e_full = tb.transpose() * e_hat * ta;
    let projected = EssentialMatrix::project(&e_full);
    let n = projected.0.norm();
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    Some(EssentialMatrix(projected.0 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinimalSolver {
    EightPoint,
    FivePoint,
}

impl MinimalSolver {
    pub fn sample_size(self) -> usize {
        match self {
            MinimalSolver::EightPoint => 8,
            MinimalSolver::FivePoint => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub seed: u64,
    pub max_iterations: usize,
    /// Inlier threshold on the Sampson distance (normalized coordinates).
    pub threshold: f64,
    /// Minimum inlier ratio accepted.
    pub min_inlier_ratio: f64,
    pub confidence: f64,
    pub solver: MinimalSolver,
    /// Median inlier parallax below which the translation is unreliable (radians).
    pub reliable_parallax: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iterations: 1000,
            threshold: 1e-3,
            min_inlier_ratio: 0.33,
            confidence: 0.999,
            solver: MinimalSolver::FivePoint,
            reliable_parallax: 0.5f64.to_radians(),
        }
    }
}

/// Relative motion `x_b = R x_a + t` with `t` known up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation,
    pub direction: Unit<Vector3<f64>>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub edge_weight: f64,
    /// Median rotation-compensated ray angle of inliers (radians).
    pub median_parallax: f64,
    pub translation_reliable: bool,
}

fn msac_score(e: &EssentialMatrix, corrs: &[Correspondence], th_sq: f64) -> (f64, usize) {
    let mut score = 0.0;
    let mut inliers = 0;
    for c in corrs {
        let d = e.sampson_sq(c);
        if d < th_sq {
            inliers += 1;
            score += d;
        } else {
            score += th_sq;
        }
    }
    (score, inliers)
}

fn inlier_set(e: &EssentialMatrix, corrs: &[Correspondence], th_sq: f64) -> Vec<Correspondence> {
    corrs.iter().filter(|c| e.sampson_sq(c) < th_sq).copied().collect()
}

fn sample_is_degenerate(sample: &[Correspondence]) -> bool {
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            if (sample[i].a - sample[j].a).norm() < 1e-12 || (sample[i].b - sample[j].b).norm() < 1e-12 {
                return true;
            }
        }
    }
    false
}

fn minimal_models(solver: MinimalSolver, sample: &[Correspondence]) -> Vec<EssentialMatrix> {
    match solver {
        MinimalSolver::EightPoint => eight_point(sample).into_iter().collect(),
        MinimalSolver::FivePoint => {
            let a: Vec<_> = sample.iter().map(|c| c.a).collect();
            let b: Vec<_> = sample.iter().map(|c| c.b).collect();
            five_point::solve(&a, &b).into_iter().map(EssentialMatrix).collect()
        }
    }
}

fn ray_angle(rotation: &Rotation, c: &Correspondence) -> f64 {
    let ra = (rotation * Vector3::new(c.a.x, c.a.y, 1.0)).normalize();
    let b = Vector3::new(c.b.x, c.b.y, 1.0).normalize();
    ra.cross(&b).norm().atan2(ra.dot(&b))
}

fn signed_sampson(rotation: &Rotation, t: &Vector3<f64>, c: &Correspondence) -> f64 {
    let e = skew(t) * rotation.matrix();
    let a = Vector3::new(c.a.x, c.a.y, 1.0);
    let b = Vector3::new(c.b.x, c.b.y, 1.0);
    let ea = e * a;
    let etb = e.transpose() * b;
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= f64::MIN_POSITIVE {
        return 0.0;
    }
    b.dot(&ea) / den.sqrt()
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Levenberg-Marquardt on the Huber-robust Sampson error of `(R, t)`,
/// `t` on the unit sphere, over the correspondences within three
/// thresholds of the starting model.
pub fn refine_relative_pose(
    rotation: &Rotation,
    direction: &Unit<Vector3<f64>>,
    corrs: &[Correspondence],
    threshold: f64,
) -> (Rotation, Unit<Vector3<f64>>) {
    let gate = 3.0 * threshold;
    let set: Vec<Correspondence> =
        corrs.iter().filter(|c| signed_sampson(rotation, direction, c).abs() < gate).copied().collect();
    let (mut r, mut t) = (*rotation, direction.into_inner());
    if set.len() < 6 {
        return (r, Unit::new_normalize(t));
    }
    let cost = |r: &Rotation, t: &Vector3<f64>| -> f64 {
        set.iter().map(|c| huber_cost(signed_sampson(r, t, c), threshold)).sum()
    };
    let apply = |r: &Rotation, t: &Vector3<f64>, basis: &(Vector3<f64>, Vector3<f64>), d: &[f64; 5]| {
        let r2 = super::rotation::exp(&Vector3::new(d[0], d[1], d[2])) * r;
        let t2 = (t + basis.0 * d[3] + basis.1 * d[4]).normalize();
        (r2, t2)
    };
    let mut current = cost(&r, &t);
    let mut lambda = 1e-3;
    for _ in 0..30 {
        let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = t.cross(&helper).normalize();
        let basis = (e1, t.cross(&e1));
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for c in &set {
            let res = signed_sampson(&r, &t, c);
            let mut j = nalgebra::Vector5::<f64>::zeros();
            for k in 0..5 {
                let h = 1e-7;
                let mut d = [0.0; 5];
                d[k] = h;
                let (rp, tp) = apply(&r, &t, &basis, &d);
                d[k] = -h;
                let (rm, tm) = apply(&r, &t, &basis, &d);
                j[k] = (signed_sampson(&rp, &tp, c) - signed_sampson(&rm, &tm, c)) / (2.0 * h);
            }
            let w = if res.abs() <= threshold { 1.0 } else { threshold / res.abs() };
            jtj += j * j.transpose() * w;
            jtr += j * (res * w);
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (r2, t2) = apply(&r, &t, &basis, &d);
            let c2 = cost(&r2, &t2);
            if c2 < current {
                let rel = (current - c2) / current.max(f64::MIN_POSITIVE);
                r = r2;
                t = t2;
                current = c2;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12 && step.norm() > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, Unit::new_normalize(t))
}

/// Robust relative pose from normalized correspondences.
pub fn estimate_relative_pose(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<RelativePose, GeometryError> {
    let s = cfg.solver.sample_size();
    if corrs.len() < 8 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least 8 correspondences, got {}",
            corrs.len()
        )));
    }
    let th_sq = cfg.threshold * cfg.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, EssentialMatrix)> = None;
    let mut required = cfg.max_iterations;
    let mut iteration = 0;
    let mut sample_buf = Vec::with_capacity(s);
    while iteration < required.min(cfg.max_iterations) {
        iteration += 1;
        sample_buf.clear();
        sample_buf.extend(sample(&mut rng, corrs.len(), s).iter().map(|i| corrs[i]));
        if sample_is_degenerate(&sample_buf) {
            continue;
        }
        for e in minimal_models(cfg.solver, &sample_buf) {
            let (score, inliers) = msac_score(&e, corrs, th_sq);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, e));
                let w = inliers as f64 / corrs.len() as f64;
                let fail = 1.0 - w.powi(s as i32);
                // A model with no support says nothing about the inlier ratio.
                required = if fail <= 1e-12 {
                    iteration
                } else if inliers == 0 || fail.ln() >= 0.0 {
                    cfg.max_iterations
                } else {
                    ((1.0 - cfg.confidence).ln() / fail.ln()).ceil().max(1.0) as usize
                };
            }
        }
    }
    let (mut score, mut e) = best.ok_or_else(|| {
        GeometryError::DegenerateConfiguration("every minimal sample was degenerate".into())
    })?;

    // Local refit on the consensus set.
    for _ in 0..3 {
        let inliers = inlier_set(&e, corrs, th_sq);
        let refit = match eight_point(&inliers) {
            Some(r) => r,
            None => break,
        };
        let (new_score, _) = msac_score(&refit, corrs, th_sq);
        if new_score < score {
            score = new_score;
            e = refit;
        } else {
            break;
        }
    }

    let inliers = inlier_set(&e, corrs, th_sq);
    let ratio = inliers.len() as f64 / corrs.len() as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(GeometryError::InsufficientInliers { ratio, floor: cfg.min_inlier_ratio });
    }
    let decomposition = decompose_essential(&e, &inliers)?;
    let winner = decomposition.best();
    let (rotation, direction) = refine_relative_pose(&winner.rotation, &winner.direction, corrs, cfg.threshold);
    let refined = EssentialMatrix::from_motion(&rotation, &direction);
    let inliers = inlier_set(&refined, corrs, th_sq);
    let ratio = inliers.len() as f64 / corrs.len() as f64;
    if ratio < cfg.min_inlier_ratio || inliers.is_empty() {
        return Err(GeometryError::InsufficientInliers { ratio, floor: cfg.min_inlier_ratio });
    }
    let mut angles: Vec<f64> = inliers.iter().map(|c| ray_angle(&rotation, c)).collect();
    angles.sort_by(f64::total_cmp);
    let median_parallax = angles[angles.len() / 2];
    Ok(RelativePose {
        rotation,
        direction,
        inlier_count: inliers.len(),
        inlier_ratio: ratio,
        edge_weight: inliers.len() as f64,
        median_parallax,
        translation_reliable: median_parallax >= cfg.reliable_parallax,
    })
}
