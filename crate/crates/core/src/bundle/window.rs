use std::collections::BTreeMap;

use nalgebra::{DVector, Point3, Vector2, Vector3};

use super::lm::{levenberg_marquardt, BlockJacobian, Linearization, LmSummary, SchurProblem};
use super::reprojection::{reprojection_jacobian, reprojection_residual};
use super::{BaConfig, BundleError};
use crate::averaging::{PositionEstimateSet, RotationEstimateSet};
use crate::geometry::{rotation, triangulate_linear, CameraIntrinsics, Pose};
use crate::tracking::TrackId;
use crate::viewgraph::{Keyframe, Window};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeInfo {
    pub kf_id: usize,
    pub frame_index: usize,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowObservation {
    pub point: usize,
    pub camera: usize,
    pub pixel: Vector2<f64>,
}

/// A track that could not be triangulated inside its window.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferredTrack {
    pub track: TrackId,
    pub views: Vec<(usize, Vector2<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    pub window_id: usize,
    pub keyframes: Vec<KeyframeInfo>,
    pub poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub point_ids: Vec<TrackId>,
    pub points: Vec<Point3<f64>>,
    pub observations: Vec<WindowObservation>,
    pub deferred: Vec<DeferredTrack>,
    pub overlap_with_prev: usize,
    pub ba: Option<LmSummary>,
}

impl WindowEstimate {
    /// Residual norm per observation (pixels); infinite behind the camera.
    pub fn residual_norms(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| {
                reprojection_residual(&self.intrinsics, &self.poses[o.camera], &self.points[o.point], &o.pixel)
                    .map_or(f64::INFINITY, |r| r.norm())
            })
            .collect()
    }

    /// Per-coordinate reprojection RMSE (pixels).
    pub fn rmse(&self) -> f64 {
        let r = self.residual_norms();
        if r.is_empty() {
            return 0.0;
        }
        (r.iter().map(|x| x * x).sum::<f64>() / (2 * r.len()) as f64).sqrt()
    }

    /// Huber cost of the triangulated observations plus a fixed charge of
    /// `huber(miss_px)` for every observation of a deferred track.
    pub fn robust_cost(&self, huber_px: f64, miss_px: f64) -> f64 {
        let h = |r: f64| if r <= huber_px { 0.5 * r * r } else { huber_px * (r - 0.5 * huber_px) };
        let seen: f64 = self.residual_norms().into_iter().map(|r| h(r.min(1e6))).sum();
        let missed: usize = self.deferred.iter().map(|d| d.views.len()).sum();
        seen + missed as f64 * h(miss_px)
    }

    /// `V_ij`: whether point `point` is observed by camera `camera`.
    pub fn visible(&self, point: usize, camera: usize) -> bool {
        self.observations.iter().any(|o| o.point == point && o.camera == camera)
    }

    pub fn point_index(&self, track: TrackId) -> Option<usize> {
        self.point_ids.iter().position(|&t| t == track)
    }

    fn observations_by_point(&self) -> Vec<Vec<usize>> {
        let mut by_point = vec![Vec::new(); self.points.len()];
        for (k, o) in self.observations.iter().enumerate() {
            by_point[o.point].push(k);
        }
        by_point
    }
}

/// Poses from averaged rotations and positions.
pub fn poses_from_averaging(rotations: &RotationEstimateSet, positions: &PositionEstimateSet) -> Vec<Pose> {
    rotations.rotations.iter().zip(&positions.positions).map(|(r, c)| Pose::new(*r, *c)).collect()
}

/// Triangulates every track seen by at least two keyframes of the window.
pub fn triangulate_window(
    window_id: usize,
    keyframes: &[Keyframe],
    poses: Vec<Pose>,
    intr: &CameraIntrinsics,
    parallax_min: f64,
    overlap_with_prev: usize,
) -> Result<WindowEstimate, BundleError> {
    let mut tracks: BTreeMap<TrackId, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
    for (cam, kf) in keyframes.iter().enumerate() {
        for (id, px) in &kf.observations {
            tracks.entry(*id).or_default().push((cam, *px));
        }
    }
    let mut est = WindowEstimate {
        window_id,
        keyframes: keyframes
            .iter()
            .map(|k| KeyframeInfo { kf_id: k.kf_id, frame_index: k.frame_index, timestamp: k.timestamp })
            .collect(),
        poses,
        intrinsics: *intr,
        point_ids: Vec::new(),
        points: Vec::new(),
        observations: Vec::new(),
        deferred: Vec::new(),
        overlap_with_prev,
        ba: None,
    };
    for (track, views) in tracks {
        if views.len() < 2 {
            continue;
        }
        let ps: Vec<Pose> = views.iter().map(|(c, _)| est.poses[*c]).collect();
        let xs: Vec<Vector2<f64>> = views.iter().map(|(_, px)| intr.correct(px)).collect();
        match triangulate_linear(&ps, &xs, parallax_min) {
            Ok(x) => {
                let idx = est.points.len();
                est.point_ids.push(track);
                est.points.push(x);
                est.observations
                    .extend(views.iter().map(|(c, px)| WindowObservation { point: idx, camera: *c, pixel: *px }));
            }
            Err(_) => est.deferred.push(DeferredTrack { track, views }),
        }
    }
    if est.points.is_empty() {
        return Err(BundleError::NoTriangulablePoints);
    }
    Ok(est)
}

pub fn initialize_structure(
    window: &Window,
    rotations: &RotationEstimateSet,
    positions: &PositionEstimateSet,
    intr: &CameraIntrinsics,
    parallax_min: f64,
) -> Result<WindowEstimate, BundleError> {
    triangulate_window(
        window.window_id,
        &window.keyframes,
        poses_from_averaging(rotations, positions),
        intr,
        parallax_min,
        window.overlap_with_prev,
    )
}

#[derive(Clone)]
struct WindowProblem<'a> {
    poses: Vec<Pose>,
    points: Vec<Point3<f64>>,
    intr: CameraIntrinsics,
    obs: &'a [WindowObservation],
    by_point: &'a [Vec<usize>],
    refine_intrinsics: bool,
    /// Camera 1 moves on the sphere around camera 0 when set.
    fix_scale: bool,
}

impl WindowProblem<'_> {
    fn n_cams(&self) -> usize {
        self.poses.len()
    }

    /// Orthonormal basis of the plane orthogonal to the camera 0-1 baseline.
    fn tangent_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let u = (self.poses[1].center - self.poses[0].center).normalize();
        let a = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = u.cross(&a).normalize();
        (e1, u.cross(&e1))
    }
}

impl SchurProblem for WindowProblem<'_> {
    fn block_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = (1..self.n_cams()).map(|c| if c == 1 && self.fix_scale { 5 } else { 6 }).collect();
        if self.refine_intrinsics {
            sizes.push(2);
        }
        sizes
    }

    fn num_points(&self) -> usize {
        self.points.len()
    }

    fn point_observations(&self) -> &[Vec<usize>] {
        self.by_point
    }

    fn num_observations(&self) -> usize {
        self.obs.len()
    }

    fn residual(&self, k: usize) -> Option<Vector2<f64>> {
        let o = &self.obs[k];
        reprojection_residual(&self.intr, &self.poses[o.camera], &self.points[o.point], &o.pixel)
    }

    fn linearize(&self, k: usize) -> Option<Linearization> {
        let o = &self.obs[k];
        let j = reprojection_jacobian(&self.intr, &self.poses[o.camera], &self.points[o.point], &o.pixel)?;
        let mut blocks = Vec::with_capacity(2);
        if o.camera > 0 {
            let jac = if o.camera == 1 && self.fix_scale {
                let (e1, e2) = self.tangent_basis();
                let mut m = BlockJacobian::zeros(5);
                m.fixed_columns_mut::<3>(0).copy_from(&j.d_rotation);
                m.set_column(3, &(j.d_center * e1));
                m.set_column(4, &(j.d_center * e2));
                m
            } else {
                let mut m = BlockJacobian::zeros(6);
                m.fixed_columns_mut::<3>(0).copy_from(&j.d_rotation);
                m.fixed_columns_mut::<3>(3).copy_from(&j.d_center);
                m
            };
            blocks.push((o.camera - 1, jac));
        }
        if self.refine_intrinsics {
            let mut m = BlockJacobian::zeros(2);
            m.copy_from(&j.d_intrinsics);
            blocks.push((self.n_cams() - 1, m));
        }
        Some(Linearization { residual: j.residual, d_point: j.d_point, blocks })
    }

    fn apply(&mut self, blocks: &[DVector<f64>], points: &[Vector3<f64>]) {
        let basis = (self.n_cams() > 1 && self.fix_scale).then(|| self.tangent_basis());
        for c in 1..self.n_cams() {
            let d = &blocks[c - 1];
            let w = Vector3::new(d[0], d[1], d[2]);
            self.poses[c].rotation = rotation::exp(&w) * self.poses[c].rotation;
            match (c, basis) {
                (1, Some((e1, e2))) => {
                    let base = self.poses[1].center - self.poses[0].center;
                    let dist = base.norm();
                    let moved = base + e1 * d[3] + e2 * d[4];
                    self.poses[1].center = self.poses[0].center + moved.normalize() * dist;
                }
                _ => self.poses[c].center += Vector3::new(d[3], d[4], d[5]),
            }
        }
        if self.refine_intrinsics {
            let d = &blocks[self.n_cams() - 1];
            self.intr.focal += d[0];
            self.intr.distortion_r += d[1];
        }
        for (p, dp) in self.points.iter_mut().zip(points) {
            *p += dp;
        }
    }
}

/// Largest angle between any two camera orientations (radians).
pub fn rotation_span(poses: &[Pose]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in poses.iter().enumerate() {
        for b in &poses[i + 1..] {
            best = best.max(rotation::angular_distance(&a.rotation, &b.rotation));
        }
    }
    best
}

fn run_lm(est: &mut WindowEstimate, cfg: &BaConfig) -> Result<LmSummary, BundleError> {
    let by_point = est.observations_by_point();
    let fix_scale = (est.poses[1].center - est.poses[0].center).norm() > 1e-12;
    let mut problem = WindowProblem {
        poses: est.poses.clone(),
        points: est.points.clone(),
        intr: est.intrinsics,
        obs: &est.observations,
        by_point: &by_point,
        refine_intrinsics: cfg.refine_intrinsics && rotation_span(&est.poses) >= cfg.intrinsics_min_rotation,
        fix_scale,
    };
    let summary = levenberg_marquardt(&mut problem, cfg)?;
    // Camera 0 is not a parameter; copy the others back.
    est.poses[1..].copy_from_slice(&problem.poses[1..]);
    est.points = problem.points;
    est.intrinsics = problem.intr;
    Ok(summary)
}

/// Drops observations with large residuals; points left with fewer than two
/// views become deferred. Returns the number of observations removed.
fn prune_outliers(est: &mut WindowEstimate, threshold: f64) -> usize {
    let norms = est.residual_norms();
    let removed = norms.iter().filter(|&&r| !(r <= threshold)).count();
    if removed == 0 {
        return 0;
    }
    let mut views: Vec<Vec<(usize, Vector2<f64>)>> = vec![Vec::new(); est.points.len()];
    for (o, r) in est.observations.iter().zip(&norms) {
        if *r <= threshold {
            views[o.point].push((o.camera, o.pixel));
        }
    }
    let mut ids = Vec::new();
    let mut points = Vec::new();
    let mut observations = Vec::new();
    for (k, v) in views.into_iter().enumerate() {
        if v.len() >= 2 {
            let idx = points.len();
            ids.push(est.point_ids[k]);
            points.push(est.points[k]);
            observations.extend(v.into_iter().map(|(camera, pixel)| WindowObservation { point: idx, camera, pixel }));
        } else {
            est.deferred.push(DeferredTrack { track: est.point_ids[k], views: v });
        }
    }
    est.deferred.sort_by_key(|d| d.track);
    est.point_ids = ids;
    est.points = points;
    est.observations = observations;
    removed
}

/// Joint refinement of the window's poses, shared intrinsics and points,
/// gauge fixed by camera 0's pose and the camera 0-1 distance.
pub fn window_bundle_adjust(mut est: WindowEstimate, cfg: &BaConfig) -> Result<WindowEstimate, BundleError> {
    if est.poses.len() < 2 || est.points.len() < 3 {
        return Err(BundleError::TooSmall { cameras: 2, points: 3 });
    }
    let mut summary = run_lm(&mut est, cfg)?;
    for _ in 0..3 {
        if prune_outliers(&mut est, cfg.outlier_px) == 0 {
            break;
        }
        if est.points.len() < 3 {
            return Err(BundleError::NoTriangulablePoints);
        }
        let again = run_lm(&mut est, cfg)?;
        summary = LmSummary {
            initial_cost: summary.initial_cost,
            final_cost: again.final_cost,
            iterations: summary.iterations + again.iterations,
            converged: again.converged,
            cost_history: {
                // A new observation set starts a new monotone sequence.
                let mut h = summary.cost_history;
                h.extend(again.cost_history.iter().skip(1));
                h
            },
        };
    }
    est.ba = Some(summary);
    Ok(est)
}
