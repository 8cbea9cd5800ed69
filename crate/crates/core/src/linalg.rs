//! Small dense linear algebra: a one-sided Jacobi SVD for 3x3 matrices and
//! the polar factor built on top of it.

use nalgebra::{Matrix3, Vector3};

/// Off-diagonal tolerance for the Jacobi sweeps, relative to column norms.
const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 64;

/// `m = u * diag(s) * v^T` with `s` sorted in decreasing order and `u`, `v`
/// orthogonal (their determinants may be -1).
#[derive(Clone, Copy, Debug)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Column rotations are applied to `a` until its columns are mutually
/// orthogonal; this diagonalizes `a^T a` implicitly without squaring the
/// condition number. The accumulated rotations form `v`, the column norms are
/// the singular values and the normalized columns form `u`.
pub fn svd3(m: &Matrix3<f64>) -> Svd3 {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = a.column(p).norm_squared();
            let beta = a.column(q).norm_squared();
            let gamma = a.column(p).dot(&a.column(q));
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for k in 0..3 {
                let ap = a[(k, p)];
                let aq = a[(k, q)];
                a[(k, p)] = c * ap - s * aq;
                a[(k, q)] = s * ap + c * aq;
                let vp = v[(k, p)];
                let vq = v[(k, q)];
                v[(k, p)] = c * vp - s * vq;
                v[(k, q)] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = Vector3::new(a.column(0).norm(), a.column(1).norm(), a.column(2).norm());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut s = Vector3::zeros();
    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut valid = [false; 3];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        vs.set_column(dst, &v.column(src));
        if norms[src] > 0.0 {
            u.set_column(dst, &(a.column(src) / norms[src]));
            valid[dst] = true;
        }
    }
    complete_orthonormal(&mut u, &mut valid);
    Svd3 { u, s, v: vs }
}

/// Fills columns of `u` marked invalid so that `u` becomes orthogonal. Valid
/// columns are re-orthogonalized against earlier ones (Gram-Schmidt).
fn complete_orthonormal(u: &mut Matrix3<f64>, valid: &mut [bool; 3]) {
    for c in 0..3 {
        if !valid[c] {
            continue;
        }
        let mut col: Vector3<f64> = u.column(c).into();
        for prev in 0..c {
            if valid[prev] {
                let p: Vector3<f64> = u.column(prev).into();
                col -= p * p.dot(&col);
            }
        }
        let n = col.norm();
        if n > 1e-8 {
            u.set_column(c, &(col / n));
        } else {
            valid[c] = false;
        }
    }
    for c in 0..3 {
        if valid[c] {
            continue;
        }
        // Pick the basis axis least aligned with the existing columns.
        let mut best = Vector3::zeros();
        let mut best_norm = -1.0;
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            for other in 0..3 {
                if valid[other] {
                    let p: Vector3<f64> = u.column(other).into();
                    e -= p * p.dot(&e);
                }
            }
            let n = e.norm();
            if n > best_norm {
                best_norm = n;
                best = e / n;
            }
        }
        u.set_column(c, &best);
        valid[c] = true;
    }
}

/// Nearest proper rotation to `m` in Frobenius norm (special orthogonal polar
/// factor).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = svd3(m);
    let d = (svd.u * svd.v.transpose()).determinant().signum();
    svd.u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.v.transpose()
}
