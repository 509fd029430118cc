use nalgebra::{Point3, Vector2, Vector3};

use super::rotation::Rotation;
use super::GeometryError;

/// Pinhole camera with a single radial coefficient.
///
/// The radial model is applied on the observation side: a measured point
/// `x` (normalized, relative to the principal point) is corrected to
/// `x * (1 + r * |x|^2)`, which is then compared to the ideal projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub distortion_r: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, distortion_r: f64) -> Result<Self, GeometryError> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal must be positive, got {focal}")));
        }
        if !(cx.is_finite() && cy.is_finite() && distortion_r.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite intrinsics".into()));
        }
        Ok(Self { focal, principal_point: Vector2::new(cx, cy), distortion_r })
    }

    /// Pixel to normalized coordinates, no distortion handling.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        (pixel - self.principal_point) / self.focal
    }

    pub fn denormalize(&self, x: &Vector2<f64>) -> Vector2<f64> {
        self.principal_point + x * self.focal
    }

    /// Measured pixel to corrected normalized coordinates, `x * psi(x)`.
    pub fn correct(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let x = self.normalize(pixel);
        x * (1.0 + self.distortion_r * x.norm_squared())
    }

    /// Inverse of the correction: the measured normalized point whose
    /// corrected value is `ideal`.
    pub fn distort_normalized(&self, ideal: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        let r = self.distortion_r;
        let target = ideal.norm();
        if r == 0.0 || target == 0.0 {
            return Ok(*ideal);
        }
        // Solve rho * (1 + r rho^2) = target for the root nearest target.
        let mut rho = target;
        for _ in 0..50 {
            let f = rho * (1.0 + r * rho * rho) - target;
            let df = 1.0 + 3.0 * r * rho * rho;
            if df <= 1e-12 {
                return Err(GeometryError::DistortionNotInvertible);
            }
            let step = f / df;
            rho -= step;
            if step.abs() <= 1e-16 * (1.0 + rho.abs()) {
                break;
            }
        }
        let residual = rho * (1.0 + r * rho * rho) - target;
        if !rho.is_finite() || rho < 0.0 || residual.abs() > 1e-12 * (1.0 + target) {
            return Err(GeometryError::DistortionNotInvertible);
        }
        Ok(ideal * (rho / target))
    }
}

/// Camera pose as world-to-camera rotation and camera center:
/// `x_cam = R (x_world - C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub center: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), center: Vector3::zeros() }
    }

    pub fn to_camera(&self, x: &Point3<f64>) -> Vector3<f64> {
        self.rotation * (x.coords - self.center)
    }

    /// Translation of the `[R | t]` form.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    /// Unit bearing of a normalized image point, expressed in world axes.
    pub fn world_ray(&self, x: &Vector2<f64>) -> Vector3<f64> {
        (self.rotation.inverse() * Vector3::new(x.x, x.y, 1.0)).normalize()
    }
}

/// Ideal (undistorted) normalized projection.
pub fn project_normalized(pose: &Pose, x: &Point3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let pc = pose.to_camera(x);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    Ok(Vector2::new(pc.x / pc.z, pc.y / pc.z))
}

/// Pixel at which `x` is observed, i.e. the measurement whose corrected
/// value equals the ideal pinhole projection.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, x: &Point3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let ideal = project_normalized(pose, x)?;
    let measured = intr.distort_normalized(&ideal)?;
    Ok(intr.denormalize(&measured))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr(r: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 320.0, 240.0, r).unwrap()
    }

    #[test]
    fn on_axis_point() {
        let p = project(&intr(0.0), &Pose::identity(), &Point3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(p, Vector2::new(320.0, 240.0));
    }

    #[test]
    fn offset_point() {
        let p = project(&intr(0.0), &Pose::identity(), &Point3::new(1.0, 0.0, 5.0)).unwrap();
        assert!((p - Vector2::new(420.0, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn radial_root_matches_scalar_oracle() {
        // Bisection on rho + 0.1 rho^3 = 0.2.
        let (mut lo, mut hi) = (0.0f64, 0.2f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + 0.1 * mid.powi(3) < 0.2 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let measured = intr(0.1).distort_normalized(&Vector2::new(0.2, 0.0)).unwrap();
        assert!((measured.x - lo).abs() < 1e-12);
        assert!((measured.x - 0.199208).abs() < 2e-6);
        assert_eq!(measured.y, 0.0);
    }

    #[test]
    fn behind_camera() {
        let e = project(&intr(0.0), &Pose::identity(), &Point3::new(0.0, 0.0, -1.0));
        assert!(matches!(e, Err(GeometryError::BehindCamera)));
        let e = project(&intr(0.0), &Pose::identity(), &Point3::new(1.0, 0.0, 0.0));
        assert!(matches!(e, Err(GeometryError::BehindCamera)));
    }

    #[test]
    fn rejects_bad_focal() {
        assert!(CameraIntrinsics::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(-3.0, 0.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn distortion_roundtrip(r in -0.3f64..0.3, x in -0.8f64..0.8, y in -0.8f64..0.8) {
            let ideal = Vector2::new(x, y);
            prop_assume!((r * ideal.norm_squared()).abs() < 0.5 * 0.6);
            let c = intr(r);
            if let Ok(measured) = c.distort_normalized(&ideal) {
                prop_assume!((r * measured.norm_squared()).abs() < 0.5);
                let back = c.correct(&c.denormalize(&measured));
                prop_assert!((back - ideal).norm() < 1e-9);
            }
        }
    }
}
