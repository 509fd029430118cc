//! SO(3) helpers on top of `nalgebra::Rotation3`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// A rotation in SO(3).
pub type Rotation = Rotation3<f64>;

/// Exponential map from an axis-angle vector.
pub fn exp(omega: &Vector3<f64>) -> Rotation {
    Rotation3::new(*omega)
}

/// Logarithm map to an axis-angle vector with angle in `[0, pi]`.
pub fn log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = 0.5 * skew.norm();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin.atan2(cos);
    if std::f64::consts::PI - angle > 1e-3 {
        let ratio = if angle < 1e-4 { 1.0 + angle * angle / 6.0 } else { angle / sin };
        return skew * (0.5 * ratio);
    }
    // The antisymmetric part vanishes near pi; recover the axis from the symmetric part.
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let mut axis = b
        .column_iter()
        .max_by(|a, c| a.norm_squared().total_cmp(&c.norm_squared()))
        .map(|c| c.normalize())
        .unwrap_or_else(Vector3::x);
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn rot_x(angle: f64) -> Rotation {
    Rotation3::from_axis_angle(&Vector3::x_axis(), angle)
}

pub fn rot_y(angle: f64) -> Rotation {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

pub fn rot_z(angle: f64) -> Rotation {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Geodesic angle between two rotations, i.e. `||log(b a^T)||`.
///
/// Equals the bivariate distance `||log(b a^-1)||_F / sqrt(2)`.
pub fn angular_distance(a: &Rotation, b: &Rotation) -> f64 {
    log(&(b * a.inverse())).norm()
}

/// Nearest rotation in Frobenius norm.
pub fn project_to_so3(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Rotation3::from_matrix_unchecked(u * d * v_t)
}

/// Quaternion as `(w, x, y, z)`.
pub fn to_quaternion(r: &Rotation) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Option<Rotation> {
    let q = nalgebra::Quaternion::new(w, x, y, z);
    let n = q.norm();
    if !n.is_finite() || n < 1e-12 {
        return None;
    }
    Some(UnitQuaternion::from_quaternion(q).to_rotation_matrix())
}
