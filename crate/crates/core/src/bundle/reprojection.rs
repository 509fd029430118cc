use nalgebra::{Matrix2, Matrix2x3, Point3, Vector2};

use crate::geometry::{rotation::skew, CameraIntrinsics, Pose};

/// Pixel residual `f * (correct(pixel) - project(X))`.
///
/// `None` when the point is not in front of the camera.
pub fn reprojection_residual(
    intr: &CameraIntrinsics,
    pose: &Pose,
    point: &Point3<f64>,
    pixel: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let xc = pose.to_camera(point);
    if !(xc.z > 0.0) {
        return None;
    }
    let u = Vector2::new(xc.x / xc.z, xc.y / xc.z);
    Some((intr.correct(pixel) - u) * intr.focal)
}

/// Residual and its derivatives.
///
/// Rotation is perturbed on the left (`R <- exp(w) R`), the center and point
/// additively, intrinsics as `(focal, distortion_r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionJacobian {
    pub residual: Vector2<f64>,
    pub d_rotation: Matrix2x3<f64>,
    pub d_center: Matrix2x3<f64>,
    pub d_point: Matrix2x3<f64>,
    pub d_intrinsics: Matrix2<f64>,
}

pub fn reprojection_jacobian(
    intr: &CameraIntrinsics,
    pose: &Pose,
    point: &Point3<f64>,
    pixel: &Vector2<f64>,
) -> Option<ReprojectionJacobian> {
    let xc = pose.to_camera(point);
    if !(xc.z > 0.0) {
        return None;
    }
    let iz = 1.0 / xc.z;
    let u = Vector2::new(xc.x * iz, xc.y * iz);
    let f = intr.focal;
    let d = pixel - intr.principal_point;
    let d2 = d.norm_squared();
    let residual = d * (1.0 + intr.distortion_r * d2 / (f * f)) - u * f;

    let du = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz) * -f;
    let r = pose.rotation.matrix();
    let d_focal = -d * (2.0 * intr.distortion_r * d2 / (f * f * f)) - u;
    let d_dist = d * (d2 / (f * f));
    Some(ReprojectionJacobian {
        residual,
        d_rotation: du * -skew(&xc),
        d_center: du * -r,
        d_point: du * r,
        d_intrinsics: Matrix2::from_columns(&[d_focal, d_dist]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences against the analytic derivatives.
    fn max_relative_discrepancy(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let h = 1e-6;
        for _cam in 0..3 {
            let pose = Pose::new(
                rotation::exp(&Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let intr = CameraIntrinsics::new(rng.random_range(400.0..600.0), 320.0, 240.0, rng.random_range(-0.1..0.1)).unwrap();
            for _pt in 0..5 {
                let point = Point3::from(pose.rotation.inverse() * Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0)) + pose.center);
                let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let jac = reprojection_jacobian(&intr, &pose, &point, &pixel).unwrap();
                let mut check = |analytic: Vector2<f64>, plus: Vector2<f64>, minus: Vector2<f64>| {
                    let numeric = (plus - minus) / (2.0 * h);
                    let scale = analytic.amax().max(numeric.amax()).max(1.0);
                    worst = worst.max((analytic - numeric).amax() / scale);
                };
                for k in 0..3 {
                    let e = Vector3::ith(k, h);
                    let res = |p: &Pose, x: &Point3<f64>| reprojection_residual(&intr, p, x, &pixel).unwrap();
                    let rp = Pose::new(rotation::exp(&e) * pose.rotation, pose.center);
                    let rm = Pose::new(rotation::exp(&-e) * pose.rotation, pose.center);
                    check(jac.d_rotation.column(k).into(), res(&rp, &point), res(&rm, &point));
                    let cp = Pose::new(pose.rotation, pose.center + e);
                    let cm = Pose::new(pose.rotation, pose.center - e);
                    check(jac.d_center.column(k).into(), res(&cp, &point), res(&cm, &point));
                    check(jac.d_point.column(k).into(), res(&pose, &(point + e)), res(&pose, &(point - e)));
                }
                let with = |f: f64, r: f64| {
                    let i = CameraIntrinsics { focal: f, distortion_r: r, ..intr };
                    reprojection_residual(&i, &pose, &point, &pixel).unwrap()
                };
                let (f, r) = (intr.focal, intr.distortion_r);
                check(jac.d_intrinsics.column(0).into(), with(f + h, r), with(f - h, r));
                check(jac.d_intrinsics.column(1).into(), with(f, r + h), with(f, r - h));
            }
        }
        worst
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for seed in 0..10 {
            let d = max_relative_discrepancy(seed);
            assert!(d < 1e-5, "seed {seed}: {d}");
        }
    }

    #[test]
    fn behind_camera_has_no_residual() {
        let intr = CameraIntrinsics::new(500.0, 320.0, 240.0, 0.0).unwrap();
        assert!(reprojection_residual(&intr, &Pose::identity(), &Point3::new(0.0, 0.0, -1.0), &Vector2::zeros()).is_none());
    }
}
