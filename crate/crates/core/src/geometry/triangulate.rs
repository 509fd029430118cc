use nalgebra::{DMatrix, Point3, Vector2};

use super::camera::Pose;
use super::GeometryError;

/// Largest pairwise angle between the viewing rays of `x` (radians).
pub fn max_ray_angle(poses: &[Pose], obs: &[Vector2<f64>]) -> f64 {
    let rays: Vec<_> = poses.iter().zip(obs).map(|(p, x)| p.world_ray(x)).collect();
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let a = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j]));
            best = best.max(a);
        }
    }
    best
}

/// Linear (DLT) triangulation from normalized, distortion-corrected
/// observations.
pub fn triangulate_linear(poses: &[Pose], obs: &[Vector2<f64>], parallax_min: f64) -> Result<Point3<f64>, GeometryError> {
    if poses.len() != obs.len() {
        return Err(GeometryError::LengthMismatch(poses.len(), obs.len()));
    }
    if poses.len() < 2 {
        return Err(GeometryError::LowParallax(0.0));
    }
    let angle = max_ray_angle(poses, obs);
    if !(angle >= parallax_min) {
        return Err(GeometryError::LowParallax(angle));
    }
    // Center and scale the camera positions for conditioning.
    let n = poses.len() as f64;
    let centroid = poses.iter().map(|p| p.center).sum::<nalgebra::Vector3<f64>>() / n;
    let spread = poses.iter().map(|p| (p.center - centroid).norm()).sum::<f64>() / n;
    let scale = if spread > 1e-12 { 1.0 / spread } else { 1.0 };

    let mut a = DMatrix::<f64>::zeros(2 * poses.len(), 4);
    for (i, (pose, x)) in poses.iter().zip(obs).enumerate() {
        let r = pose.rotation.matrix();
        let t = -(r * ((pose.center - centroid) * scale));
        let row = |k: usize| nalgebra::RowVector4::new(r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k]);
        a.set_row(2 * i, &(row(2) * x.x - row(0)));
        a.set_row(2 * i + 1, &(row(2) * x.y - row(1)));
    }
    for mut row in a.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::LowParallax(angle))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("four singular values");
    let h = v_t.row(k);
    if h[3].abs() < 1e-300 {
        return Err(GeometryError::LowParallax(angle));
    }
    let local = nalgebra::Vector3::new(h[0], h[1], h[2]) / h[3];
    let x = Point3::from(local / scale + centroid);
    if !x.coords.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::LowParallax(angle));
    }
    for pose in poses {
        if pose.to_camera(&x).z <= 0.0 {
            return Err(GeometryError::BehindCamera);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::project_normalized;
    use crate::geometry::rotation::{rot_y, Rotation};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const FLOOR: f64 = 0.017453292519943295;

    fn two_views() -> Vec<Pose> {
        vec![Pose::identity(), Pose::new(Rotation::identity(), Vector3::new(1.0, 0.0, 0.0))]
    }

    #[test]
    fn exact_two_view() {
        let x = Point3::new(0.0, 0.0, 5.0);
        let poses = two_views();
        let obs: Vec<_> = poses.iter().map(|p| project_normalized(p, &x).unwrap()).collect();
        let got = triangulate_linear(&poses, &obs, FLOOR).unwrap();
        assert!((got - x).norm() < 1e-9);
    }

    /// Midpoint of the common perpendicular of two rays.
    fn midpoint(poses: &[Pose], obs: &[Vector2<f64>]) -> Point3<f64> {
        let (c0, c1) = (poses[0].center, poses[1].center);
        let (d0, d1) = (poses[0].world_ray(&obs[0]), poses[1].world_ray(&obs[1]));
        let w = c0 - c1;
        let (a, b, c, d, e) = (d0.dot(&d0), d0.dot(&d1), d1.dot(&d1), d0.dot(&w), d1.dot(&w));
        let den = a * c - b * b;
        let s = (b * e - c * d) / den;
        let t = (a * e - b * d) / den;
        Point3::from(((c0 + d0 * s) + (c1 + d1 * t)) * 0.5)
    }

    #[test]
    fn noisy_two_view_agrees_with_midpoint_oracle() {
        let x = Point3::new(0.0, 0.0, 5.0);
        let poses = two_views();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.5 / 500.0).unwrap();
        let (mut dlt_sq, mut mid_sq) = (0.0, 0.0);
        for _ in 0..400 {
            let obs: Vec<_> = poses
                .iter()
                .map(|p| project_normalized(p, &x).unwrap() + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            dlt_sq += (triangulate_linear(&poses, &obs, FLOOR).unwrap() - x).norm_squared();
            mid_sq += (midpoint(&poses, &obs) - x).norm_squared();
        }
        let (dlt, mid) = (dlt_sq.sqrt(), mid_sq.sqrt());
        assert!((dlt - mid).abs() <= 0.1 * mid, "dlt {dlt} midpoint {mid}");
    }

    #[test]
    fn coincident_centers_low_parallax() {
        let poses = vec![Pose::identity(), Pose::new(rot_y(0.1), Vector3::zeros())];
        let x = Point3::new(0.3, 0.1, 4.0);
        let obs: Vec<_> = poses.iter().map(|p| project_normalized(p, &x).unwrap()).collect();
        assert!(matches!(triangulate_linear(&poses, &obs, FLOOR), Err(GeometryError::LowParallax(_))));
    }

    #[test]
    fn behind_camera_detected() {
        let poses = two_views();
        // Rays diverging: intersection lies behind both cameras.
        let obs = vec![Vector2::new(-0.3, 0.0), Vector2::new(0.3, 0.0)];
        assert!(matches!(triangulate_linear(&poses, &obs, FLOOR), Err(GeometryError::BehindCamera)));
    }

    #[test]
    fn multi_view_reprojects_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..9.0));
            let poses: Vec<_> = (0..4)
                .map(|i| Pose::new(rot_y(0.03 * i as f64), Vector3::new(0.4 * i as f64, 0.05 * i as f64, 0.1)))
                .collect();
            let obs: Vec<_> = poses.iter().map(|p| project_normalized(p, &x).unwrap()).collect();
            let got = triangulate_linear(&poses, &obs, FLOOR).unwrap();
            for (p, o) in poses.iter().zip(&obs) {
                let err = (project_normalized(p, &got).unwrap() - o).norm() * 500.0;
                assert!(err <= 1e-7, "reprojection {err} px");
            }
        }
    }
}
