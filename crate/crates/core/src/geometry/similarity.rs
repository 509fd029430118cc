use nalgebra::{Matrix3, Point3, Vector3};

use super::rotation::Rotation;
use super::GeometryError;

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, x: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * x.coords * self.scale + self.translation)
    }

    pub fn apply_vec(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self { scale: 1.0 / self.scale, rotation: rinv, translation: -(rinv * self.translation) / self.scale }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Similarity) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply_vec(&other.translation),
        }
    }
}

/// Least-squares similarity mapping `src` onto `dst`.
pub fn umeyama_similarity(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<Similarity, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegenerateSet(format!("need 3 point pairs, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s.coords - mu_s;
        let b = d.coords - mu_d;
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;

    // Collinear or coincident source points leave the rotation undetermined.
    let spread = src_cov.symmetric_eigenvalues();
    let (lo, hi) = spread.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let mid = spread.iter().copied().sum::<f64>() - lo - hi;
    if hi <= 0.0 || mid <= 1e-12 * hi {
        return Err(GeometryError::DegenerateSet("source points are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let s = svd.singular_values;
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        let imin = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).expect("3 values");
        d[imin] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = s.dot(&d) / var_s;
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity { scale, rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation::{angular_distance, exp, rot_z};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect()
    }

    fn cost(s: &Similarity, src: &[Point3<f64>], dst: &[Point3<f64>]) -> f64 {
        src.iter().zip(dst).map(|(a, b)| (s.apply(a) - b).norm_squared()).sum()
    }

    #[test]
    fn identity_on_equal_sets() {
        let p = random_points(10, 1);
        let s = umeyama_similarity(&p, &p).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(angular_distance(&s.rotation, &Rotation::identity()) < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn exact_recovery() {
        let truth = Similarity { scale: 2.5, rotation: rot_z(30f64.to_radians()), translation: Vector3::new(1.0, 2.0, 3.0) };
        let src = random_points(10, 2);
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let s = umeyama_similarity(&src, &dst).unwrap();
        assert!((s.scale - 2.5).abs() < 1e-9);
        assert!(angular_distance(&s.rotation, &truth.rotation) < 1e-9);
        assert!((s.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn reflection_is_corrected() {
        let src = random_points(12, 3);
        let dst: Vec<_> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let s = umeyama_similarity(&src, &dst).unwrap();
        assert!((s.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_is_degenerate() {
        let src = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0), Point3::new(2.0, 2.0, 2.0)];
        assert!(matches!(umeyama_similarity(&src, &src), Err(GeometryError::DegenerateSet(_))));
    }

    #[test]
    fn compose_and_inverse() {
        let a = Similarity { scale: 1.7, rotation: rot_z(0.3), translation: Vector3::new(0.1, -2.0, 0.5) };
        let id = a.compose(&a.inverse());
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn locally_optimal(seed in 0u64..1000) {
            let src = random_points(15, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
            let dst: Vec<_> = src
                .iter()
                .map(|p| Point3::new(p.x * 1.3 + rng.random_range(-0.2..0.2), p.z + rng.random_range(-0.2..0.2), -p.y + 4.0))
                .collect();
            let best = umeyama_similarity(&src, &dst).unwrap();
            let c0 = cost(&best, &src, &dst);
            for _ in 0..100 {
                let pert = Similarity {
                    scale: best.scale * (1.0 + rng.random_range(-1e-3..1e-3)),
                    rotation: exp(&Vector3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3))) * best.rotation,
                    translation: best.translation + Vector3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)),
                };
                prop_assert!(cost(&pert, &src, &dst) >= c0 - 1e-12);
            }
        }
    }
}
