//! Structure initialization, windowed bundle adjustment, merging of windows
//! into a global map and cross-window refinement.

mod export;
mod lm;
mod map;
mod refine;
mod reprojection;
mod window;

pub use export::{format_significant, trajectory, write_ply, write_tum, TumPose};
pub use lm::LmSummary;
pub use map::{merge_window, BreakMarker, BreakReason, GlobalMap, MapKeyframe, MapPoint, MergeOutcome, WindowRecord};
pub use refine::{cross_window_rmse, global_refine, RefineReport};
pub use reprojection::{reprojection_jacobian, reprojection_residual, ReprojectionJacobian};
pub use window::{
    initialize_structure, poses_from_averaging, rotation_span, triangulate_window, window_bundle_adjust, DeferredTrack, KeyframeInfo,
    WindowEstimate, WindowObservation,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error("no track could be triangulated")]
    NoTriangulablePoints,
    #[error("normal equations are singular after gauge fixing")]
    SingularNormalEquations,
    #[error("bundle adjustment needs at least {cameras} cameras and {points} points")]
    TooSmall { cameras: usize, points: usize },
    #[error("no anchors shared with the map")]
    NoAnchors,
    #[error("degenerate anchor set: {0}")]
    DegenerateSet(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve stops.
    pub function_tolerance: f64,
    /// Largest parameter update below which the solve stops.
    pub parameter_tolerance: f64,
    /// Huber width on the reprojection residual norm (pixels).
    pub huber_px: f64,
    pub damping_init: f64,
    /// Also refine the shared focal length and radial coefficient.
    pub refine_intrinsics: bool,
    /// Intrinsics stay fixed in windows whose camera rotations span less
    /// than this angle (radians): under near-pure translation the focal
    /// length trades off against depth.
    pub intrinsics_min_rotation: f64,
    /// Observations above this residual (pixels) are dropped after the solve.
    pub outlier_px: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            huber_px: 2.0,
            damping_init: 1e-4,
            refine_intrinsics: true,
            intrinsics_min_rotation: 5f64.to_radians(),
            outlier_px: 8.0,
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::{Point3, Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::{KeyframeInfo, WindowEstimate, WindowObservation};
    use crate::geometry::{project, rotation, CameraIntrinsics, Pose};

    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
        let z = (target - center).normalize();
        let x = Vector3::y().cross(&z).normalize();
        let y = z.cross(&x);
        let m = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose::new(crate::geometry::Rotation::from_matrix_unchecked(m), center)
    }

    /// Cameras on an arc looking at a cloud of points around the origin.
    pub fn arc_scene(seed: u64, n_cams: usize, n_points: usize) -> (Vec<Pose>, Vec<Point3<f64>>, CameraIntrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = (0..n_cams)
            .map(|k| {
                let a = -0.5 + k as f64 / (n_cams - 1).max(1) as f64;
                let c = Vector3::new(6.0 * a.sin(), 0.3 * (k as f64).sin(), -6.0 * a.cos());
                look_at(c, Vector3::new(0.0, 0.0, 0.0))
            })
            .collect();
        let points = (0..n_points)
            .map(|_| Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        (poses, points, CameraIntrinsics::new(500.0, 320.0, 240.0, 0.02).unwrap())
    }

    /// Window estimate with every point observed by every camera.
    pub fn estimate(poses: &[Pose], points: &[Point3<f64>], intr: &CameraIntrinsics, noise: f64, seed: u64) -> WindowEstimate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut observations = Vec::new();
        for (p, x) in points.iter().enumerate() {
            for (c, pose) in poses.iter().enumerate() {
                let mut px = project(intr, pose, x).unwrap();
                if noise > 0.0 {
                    px += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                }
                observations.push(WindowObservation { point: p, camera: c, pixel: px });
            }
        }
        WindowEstimate {
            window_id: 0,
            keyframes: (0..poses.len())
                .map(|k| KeyframeInfo { kf_id: k, frame_index: k, timestamp: k as f64 })
                .collect(),
            poses: poses.to_vec(),
            intrinsics: *intr,
            point_ids: (0..points.len() as u64).collect(),
            points: points.to_vec(),
            observations,
            deferred: Vec::new(),
            overlap_with_prev: 0,
            ba: None,
        }
    }

    pub fn perturb(est: &mut WindowEstimate, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let base = (est.poses[1].center - est.poses[0].center).norm();
        for c in 1..est.poses.len() {
            let w = unit().normalize() * 1f64.to_radians();
            est.poses[c].rotation = rotation::exp(&w) * est.poses[c].rotation;
            est.poses[c].center += unit() * 0.01 * 6.0;
        }
        let c0 = est.poses[0].center;
        est.poses[1].center = c0 + (est.poses[1].center - c0).normalize() * base;
        for p in &mut est.points {
            p.coords += unit() * 0.01 * p.coords.norm().max(1.0);
        }
        est.intrinsics.focal *= 1.02;
        est.intrinsics.distortion_r = 0.0;
    }
}
