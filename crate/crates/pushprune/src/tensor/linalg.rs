//! Small dense symmetric linear algebra: Cholesky factorization, triangular
//! solves and a cyclic Jacobi eigensolver. Everything here is plain `f64` on
//! row-major slices; dimensions at the call sites are latent-space sized
//! (tens, not thousands).

use crate::error::{Error, Result};

/// Lower Cholesky factor L of a symmetric positive-definite `a` (d×d,
/// row-major). Fails with the 1-based order of the first non-positive
/// leading minor.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Singular { minor: i + 1 });
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Solve L · X = B for X, with L lower-triangular d×d and B d×n.
pub fn forward_subst(l: &[f64], d: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            let lik = l[i * d + k];
            if lik != 0.0 {
                for j in 0..n {
                    x[i * n + j] -= lik * x[k * n + j];
                }
            }
        }
        let inv = 1.0 / l[i * d + i];
        for j in 0..n {
            x[i * n + j] *= inv;
        }
    }
    x
}

/// Solve Lᵀ · X = B for X, with L lower-triangular d×d and B d×n.
pub fn back_subst_t(l: &[f64], d: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let lki = l[k * d + i];
            if lki != 0.0 {
                for j in 0..n {
                    x[i * n + j] -= lki * x[k * n + j];
                }
            }
        }
        let inv = 1.0 / l[i * d + i];
        for j in 0..n {
            x[i * n + j] *= inv;
        }
    }
    x
}

/// Solve A · X = B with A symmetric positive-definite (d×d) and B d×n,
/// via Cholesky.
pub fn spd_solve(a: &[f64], d: usize, b: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, d)?;
    Ok(spd_solve_with_factor(&l, d, b, n))
}

/// Solve with a precomputed Cholesky factor.
pub fn spd_solve_with_factor(l: &[f64], d: usize, b: &[f64], n: usize) -> Vec<f64> {
    let y = forward_subst(l, d, b, n);
    back_subst_t(l, d, &y, n)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (descending) and eigenvectors as columns of a d×d
/// row-major matrix, paired by index.
pub fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    // enforce exact symmetry so rotations stay consistent
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (frob + f64::MIN_POSITIVE) * 1e-15;

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off = off.max(m[i * d + j].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rows/cols p and q of m
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        m[j * d + j]
            .partial_cmp(&m[i * d + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * d + i]).collect();
    let mut vectors = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vectors[r * d + new_col] = v[r * d + old_col];
        }
    }
    (eigenvalues, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip() {
        // A = M·Mᵀ + I is SPD
        let d = 5;
        let mvals: Vec<f64> = (0..d * d).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..d {
                    s += mvals[i * d + k] * mvals[j * d + k];
                }
                a[i * d + j] = s;
            }
        }
        let l = cholesky(&a, d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += l[i * d + k] * l[j * d + k];
                }
                assert!((s - a[i * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_reports_offending_minor() {
        // indefinite: fails at the second leading minor
        let a = vec![1.0, 2.0, 2.0, 1.0];
        match cholesky(&a, 2) {
            Err(Error::Singular { minor }) => assert_eq!(minor, 2),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn spd_solve_inverts() {
        let a = vec![4.0, 1.0, 1.0, 3.0];
        let b = vec![1.0, 0.0, 0.0, 1.0];
        let x = spd_solve(&a, 2, &b, 2).unwrap();
        // A·X should be I
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..2).map(|k| a[i * 2 + k] * x[k * 2 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(3,1) rotated by 45 degrees
        let c = std::f64::consts::FRAC_1_SQRT_2;
        // R·D·Rᵀ with D = diag(3,1)
        let a = vec![
            c * c * 3.0 + c * c * 1.0,
            c * c * 3.0 - c * c * 1.0,
            c * c * 3.0 - c * c * 1.0,
            c * c * 3.0 + c * c * 1.0,
        ];
        let (w, v) = jacobi_eigh(&a, 2);
        assert!((w[0] - 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-12);
        // residual ‖A·v − w·v‖
        for j in 0..2 {
            for i in 0..2 {
                let av: f64 = (0..2).map(|k| a[i * 2 + k] * v[k * 2 + j]).sum();
                assert!((av - w[j] * v[i * 2 + j]).abs() < 1e-12);
            }
        }
    }
}
