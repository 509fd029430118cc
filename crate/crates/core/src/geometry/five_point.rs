//! Minimal five-point essential matrix solver.
//!
//! The nullspace of the five epipolar constraints is written as
//! `E = x X + y Y + z Z + W`. The cubic constraints `det(E) = 0` and
//! `2 E E^T E - tr(E E^T) E = 0` give ten equations in the twenty monomials
//! of degree <= 3. Gauss-Jordan elimination of the cubic monomials leaves
//! the action matrix of multiplication by `x` on the quotient basis
//! `{x^2, xy, xz, y^2, yz, z^2, x, y, z, 1}`; its real eigenvectors are the
//! solutions.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector2};

type Poly = [f64; 20];

/// Exponents of each monomial: ten cubics, then the quotient basis.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (2, 0, 1),
    (1, 2, 0),
    (1, 1, 1),
    (1, 0, 2),
    (0, 3, 0),
    (0, 2, 1),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (1, 0, 1),
    (0, 2, 0),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

const IDX_X: usize = 16;
const IDX_Y: usize = 17;
const IDX_Z: usize = 18;
const IDX_ONE: usize = 19;

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS.iter().position(|m| *m == e).expect("degree <= 3")
}

fn mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = [0.0; 20];
    for (i, &ca) in a.iter().enumerate() {
        if ca == 0.0 {
            continue;
        }
        let ea = MONOMIALS[i];
        for (j, &cb) in b.iter().enumerate() {
            if cb == 0.0 {
                continue;
            }
            let eb = MONOMIALS[j];
            let e = (ea.0 + eb.0, ea.1 + eb.1, ea.2 + eb.2);
            debug_assert!(e.0 + e.1 + e.2 <= 3);
            out[monomial_index(e)] += ca * cb;
        }
    }
    out
}

fn add(a: &Poly, b: &Poly) -> Poly {
    let mut out = *a;
    for (o, v) in out.iter_mut().zip(b) {
        *o += v;
    }
    out
}

fn scale(a: &Poly, s: f64) -> Poly {
    let mut out = *a;
    for o in out.iter_mut() {
        *o *= s;
    }
    out
}

/// Epipolar constraint row for `b^T E a = 0`, with `E` in row-major order.
pub(crate) fn epipolar_row(a: &Vector2<f64>, b: &Vector2<f64>) -> [f64; 9] {
    let ah = [a.x, a.y, 1.0];
    let bh = [b.x, b.y, 1.0];
    let mut row = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            row[3 * r + c] = bh[r] * ah[c];
        }
    }
    row
}

/// All real essential matrices consistent with five correspondences.
/// Returns an empty list for degenerate samples.
pub fn solve(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Vec<Matrix3<f64>> {
    assert_eq!(a.len(), 5);
    assert_eq!(b.len(), 5);
    let mut q = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..5 {
        let row = epipolar_row(&a[i], &b[i]);
        for (k, v) in row.iter().enumerate() {
            q[(i, k)] = *v;
        }
    }
    let svd = q.svd(false, true);
    let v_t = match svd.v_t {
        Some(v) => v,
        None => return Vec::new(),
    };
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s_max = svd.singular_values[order[0]];
    if s_max <= 0.0 || svd.singular_values[order[4]] < 1e-10 * s_max {
        return Vec::new();
    }
    let basis: Vec<SVector<f64, 9>> = order[5..].iter().map(|&k| v_t.row(k).transpose()).collect();

    // E entries as linear polynomials in x, y, z.
    let mut e = [[[0.0; 20]; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let k = 3 * r + c;
            e[r][c][IDX_X] = basis[0][k];
            e[r][c][IDX_Y] = basis[1][k];
            e[r][c][IDX_Z] = basis[2][k];
            e[r][c][IDX_ONE] = basis[3][k];
        }
    }

    let det = {
        let m = |r: usize, c: usize| &e[r][c];
        let t0 = mul(&mul(m(0, 0), m(1, 1)), m(2, 2));
        let t1 = mul(&mul(m(0, 1), m(1, 2)), m(2, 0));
        let t2 = mul(&mul(m(0, 2), m(1, 0)), m(2, 1));
        let t3 = mul(&mul(m(0, 2), m(1, 1)), m(2, 0));
        let t4 = mul(&mul(m(0, 0), m(1, 2)), m(2, 1));
        let t5 = mul(&mul(m(0, 1), m(1, 0)), m(2, 2));
        add(&add(&add(&t0, &t1), &t2), &scale(&add(&add(&t3, &t4), &t5), -1.0))
    };

    let mut eet = [[[0.0; 20]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = [0.0; 20];
            for k in 0..3 {
                acc = add(&acc, &mul(&e[i][k], &e[j][k]));
            }
            eet[i][j] = acc;
        }
    }
    let trace = add(&add(&eet[0][0], &eet[1][1]), &eet[2][2]);

    let mut coeffs = DMatrix::<f64>::zeros(10, 20);
    for (k, v) in det.iter().enumerate() {
        coeffs[(0, k)] = *v;
    }
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = [0.0; 20];
            for k in 0..3 {
                acc = add(&acc, &mul(&eet[i][k], &e[k][j]));
            }
            let eq = add(&scale(&acc, 2.0), &scale(&mul(&trace, &e[i][j]), -1.0));
            for (k, v) in eq.iter().enumerate() {
                coeffs[(1 + 3 * i + j, k)] = *v;
            }
        }
    }

    let lead = coeffs.columns(0, 10).into_owned();
    let rest = coeffs.columns(10, 10).into_owned();
    let lu = lead.lu();
    let reduced = match lu.solve(&rest) {
        Some(m) if m.iter().all(|v| v.is_finite()) => m,
        _ => return Vec::new(),
    };

    // Rows of the action matrix: x * basis_i in terms of the basis.
    // Cubic monomial m reduces to -reduced[m, :].
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for i in 0..10 {
        let (ex, ey, ez) = MONOMIALS[10 + i];
        let target = monomial_index((ex + 1, ey, ez));
        if target < 10 {
            for k in 0..10 {
                action[(i, k)] = -reduced[(target, k)];
            }
        } else {
            action[(i, target - 10)] = 1.0;
        }
    }

    let eigenvalues = action.complex_eigenvalues();
    let mut out = Vec::new();
    let scale_ref = eigenvalues.iter().map(|c| c.norm()).fold(1.0, f64::max);
    for lambda in eigenvalues.iter() {
        if lambda.im.abs() > 1e-8 * scale_ref {
            continue;
        }
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = match svd.v_t {
            Some(v) => v,
            None => continue,
        };
        let (kmin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        let v = v_t.row(kmin);
        let w = v[IDX_ONE - 10];
        if w.abs() < 1e-12 {
            continue;
        }
        let x = v[IDX_X - 10] / w;
        let y = v[IDX_Y - 10] / w;
        let z = v[IDX_Z - 10] / w;
        let ev = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let m = Matrix3::from_row_slice(ev.as_slice());
        let n = m.norm();
        if n.is_finite() && n > 0.0 {
            out.push(m / n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation::{rot_x, rot_y, skew};
    use nalgebra::{Point3, Vector3};

    #[test]
    fn recovers_true_essential_among_candidates() {
        let r = rot_y(0.1) * rot_x(-0.05);
        let t = Vector3::new(0.8, 0.1, 0.3).normalize();
        let truth = skew(&t) * r.matrix();
        let truth = truth / truth.norm();
        let pts = [
            Point3::new(0.3, -0.2, 4.0),
            Point3::new(-1.0, 0.5, 6.0),
            Point3::new(0.7, 0.9, 5.0),
            Point3::new(-0.4, -0.8, 3.5),
            Point3::new(1.2, 0.1, 7.0),
        ];
        let a: Vec<_> = pts.iter().map(|p| Vector2::new(p.x / p.z, p.y / p.z)).collect();
        let b: Vec<_> = pts
            .iter()
            .map(|p| {
                let q = r * p.coords + t;
                Vector2::new(q.x / q.z, q.y / q.z)
            })
            .collect();
        let sols = solve(&a, &b);
        assert!(!sols.is_empty() && sols.len() <= 10);
        let best = sols
            .iter()
            .map(|e| (e - truth).norm().min((e + truth).norm()))
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8, "closest candidate off by {best}");
        for e in &sols {
            for (pa, pb) in a.iter().zip(&b) {
                let v = Vector3::new(pb.x, pb.y, 1.0).dot(&(e * Vector3::new(pa.x, pa.y, 1.0)));
                assert!(v.abs() < 1e-8);
            }
        }
    }
}
