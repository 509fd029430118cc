use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};

use super::EvalError;
use crate::bundle::{GlobalMap, TumPose};
use crate::geometry::{rotation, umeyama_similarity, Rotation, Similarity};
use crate::tracking::TrackId;

/// Pairs `(est, gt)` whose timestamps differ by at most `max_dt`, nearest
/// ground-truth sample first.
pub fn associate(est: &[TumPose], gt: &[TumPose], max_dt: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| gt[a].timestamp.total_cmp(&gt[b].timestamp));
    let times: Vec<f64> = order.iter().map(|&k| gt[k].timestamp).collect();
    let mut out = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let pos = times.partition_point(|t| *t < e.timestamp);
        let best = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter(|&k| k < times.len())
            .min_by(|&a, &b| (times[a] - e.timestamp).abs().total_cmp(&(times[b] - e.timestamp).abs()));
        if let Some(k) = best.filter(|&k| (times[k] - e.timestamp).abs() <= max_dt) {
            out.push((i, order[k]));
        }
    }
    out
}

/// Default association window (seconds).
const MAX_DT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    /// Position RMSE after 7-dof alignment (meters).
    pub rmse: f64,
    pub pairs: usize,
    /// Maps the estimate onto the ground truth.
    pub similarity: Similarity,
}

pub fn ate_rmse(est: &[TumPose], gt: &[TumPose]) -> Result<AteResult, EvalError> {
    let pairs = associate(est, gt, MAX_DT);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let src: Vec<Point3<f64>> = pairs.iter().map(|(i, _)| Point3::from(est[*i].position)).collect();
    let dst: Vec<Point3<f64>> = pairs.iter().map(|(_, j)| Point3::from(gt[*j].position)).collect();
    let similarity = if principal_axis(&dst).is_some() {
        let orient: Vec<(Rotation, Rotation)> = pairs.iter().map(|(i, j)| (est[*i].orientation, gt[*j].orientation)).collect();
        align_collinear(&src, &dst, &orient)?
    } else {
        umeyama_similarity(&src, &dst).map_err(|e| EvalError::DegenerateSet(e.to_string()))?
    };
    let sum: f64 = src.iter().zip(&dst).map(|(s, d)| (similarity.apply(s) - d).norm_squared()).sum();
    Ok(AteResult { rmse: (sum / pairs.len() as f64).sqrt(), pairs: pairs.len(), similarity })
}

fn centroid(p: &[Point3<f64>]) -> Vector3<f64> {
    p.iter().map(|x| x.coords).sum::<Vector3<f64>>() / p.len() as f64
}

/// Direction of a point set whose spread is confined to one line, `None`
/// otherwise (or when all points coincide).
fn principal_axis(p: &[Point3<f64>]) -> Option<Vector3<f64>> {
    let mu = centroid(p);
    let cov: Matrix3<f64> = p.iter().map(|x| (x.coords - mu) * (x.coords - mu).transpose()).sum();
    let eig = cov.symmetric_eigen();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (hi, mid) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    (hi > 0.0 && mid <= 1e-12 * hi).then(|| eig.eigenvectors.column(order[0]).into_owned())
}

/// Similarity for a straight ground-truth path. Positions fix scale,
/// translation and the direction of the line; the roll about the line,
/// which positions leave free, is taken from the camera orientations.
fn align_collinear(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    orientations: &[(Rotation, Rotation)],
) -> Result<Similarity, EvalError> {
    let dd = principal_axis(dst).ok_or_else(|| EvalError::DegenerateSet("ground truth is not a line".into()))?;
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let cov: Matrix3<f64> = src.iter().map(|x| (x.coords - mu_s) * (x.coords - mu_s).transpose()).sum();
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    if !(eig.eigenvalues[k] > 0.0) {
        return Err(EvalError::DegenerateSet("estimated positions coincide".into()));
    }
    let ds = eig.eigenvectors.column(k).into_owned();
    let s: Vec<f64> = src.iter().map(|x| (x.coords - mu_s).dot(&ds)).collect();
    let t: Vec<f64> = dst.iter().map(|x| (x.coords - mu_d).dot(&dd)).collect();
    let st: f64 = s.iter().zip(&t).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|a| a * a).sum();
    let dd = if st < 0.0 { -dd } else { dd };

    // Shortest rotation taking ds onto dd.
    let axis = ds.cross(&dd);
    let r0 = if axis.norm() > 1e-12 {
        rotation::exp(&(axis.normalize() * axis.norm().atan2(ds.dot(&dd))))
    } else if ds.dot(&dd) > 0.0 {
        Rotation::identity()
    } else {
        let other = if ds.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        rotation::exp(&(ds.cross(&other).normalize() * std::f64::consts::PI))
    };
    // Roll about dd maximizing agreement of the orientations.
    let m: Matrix3<f64> = orientations.iter().map(|(e, g)| g.matrix() * (r0 * e).matrix().transpose()).sum();
    let a_ma = dd.dot(&(m * dd));
    let skew = rotation::skew(&dd);
    let sin_term = (skew.transpose() * m).trace();
    let phi = sin_term.atan2(m.trace() - a_ma);
    let r = rotation::exp(&(dd * phi)) * r0;
    let scale = st.abs() / ss;
    Ok(Similarity { scale, rotation: r, translation: mu_d - (r * mu_s) * scale })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedAte {
    /// Pooled RMSE over all aligned segments (meters).
    pub rmse: f64,
    pub pairs: usize,
    /// Alignment of each segment; `None` when it had too few poses to align.
    pub similarities: Vec<Option<Similarity>>,
}

/// ATE with each disconnected segment aligned on its own. Segments with
/// fewer than three poses are skipped.
pub fn ate_rmse_segments(segments: &[Vec<TumPose>], gt: &[TumPose]) -> Result<SegmentedAte, EvalError> {
    let mut sum = 0.0;
    let mut pairs = 0;
    let mut similarities = Vec::with_capacity(segments.len());
    for seg in segments {
        match ate_rmse(seg, gt) {
            Ok(r) => {
                sum += r.rmse * r.rmse * r.pairs as f64;
                pairs += r.pairs;
                similarities.push(Some(r.similarity));
            }
            Err(EvalError::TooFewPairs(_)) if segments.len() > 1 => similarities.push(None),
            Err(e) => return Err(e),
        }
    }
    if pairs < 3 {
        return Err(EvalError::TooFewPairs(pairs));
    }
    Ok(SegmentedAte { rmse: (sum / pairs as f64).sqrt(), pairs, similarities })
}

/// RMSE (centimeters) between aligned estimated points and ground truth,
/// associated by track id.
pub fn depth_rmse(
    points: &[(TrackId, Point3<f64>)],
    gt: &BTreeMap<TrackId, Point3<f64>>,
    alignment: &Similarity,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (id, p) in points {
        if let Some(g) = gt.get(id) {
            sum += (alignment.apply(p) - g).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoAssociations);
    }
    Ok(100.0 * (sum / n as f64).sqrt())
}

/// Breaks along the keyframe sequence `keyframe_frames` (frame indices in
/// order). Each maximal run of keyframes missing from the map counts once,
/// and so does every switch to a different map segment.
pub fn count_breaks(map: &GlobalMap, keyframe_frames: &[usize]) -> usize {
    let mut segment_of: BTreeMap<usize, usize> = BTreeMap::new();
    for kf in &map.keyframes {
        let s = segment_of.entry(kf.info.frame_index).or_insert(kf.segment);
        *s = (*s).max(kf.segment);
    }
    let mut breaks = 0;
    // None before the first keyframe, Some(None) while lost.
    let mut state: Option<Option<usize>> = None;
    for frame in keyframe_frames {
        let now = segment_of.get(frame).copied();
        match (state, now) {
            (None, None) | (Some(Some(_)), None) => breaks += 1,
            (Some(Some(a)), Some(b)) if a != b => breaks += 1,
            _ => {}
        }
        state = Some(now);
    }
    breaks
}
