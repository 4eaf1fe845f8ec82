//! Small dense linear algebra helpers.
//!
//! Symmetric eigendecomposition is implemented in-module with cyclic Jacobi
//! rotations; every matrix in this crate is small (at most a few hundred rows)
//! and Jacobi is foolproof on symmetric input. General nonsymmetric spectra go
//! through nalgebra's Schur-based `complex_eigenvalues`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("matrix is singular or near-singular (condition estimate > {0:.1e})")]
    NearSingular(f64),
    #[error("iteration failed to converge within {0} steps")]
    NoConvergence(usize),
}

/// Max absolute difference between `m` and its transpose.
pub fn symmetry_error(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with `m = V diag(l) V^T`; columns of
/// `V` are orthonormal. Eigenvalues are unsorted.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), LinalgError> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "jacobi_eigen requires a square matrix");
    let scale = m.amax().max(1.0);
    let asym = symmetry_error(m);
    if asym > 1e-8 * scale {
        return Err(LinalgError::NotSymmetric(asym));
    }

    let mut a = m.clone();
    // enforce exact symmetry so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = DMatrix::<f64>::identity(n, n);

    const MAX_SWEEPS: usize = 100;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-14 * scale * (n as f64) {
            let lam = DVector::from_iterator(n, (0..n).map(|i| a[(i, i)]));
            return Ok((lam, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(LinalgError::NoConvergence(MAX_SWEEPS))
}

/// Eigenvalues of a symmetric matrix sorted in descending order, with the
/// corresponding eigenvector columns.
pub fn jacobi_eigen_sorted(
    m: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), LinalgError> {
    let (lam, v) = jacobi_eigen(m)?;
    let n = lam.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| lam[j].partial_cmp(&lam[i]).unwrap());
    let lam_sorted = DVector::from_iterator(n, idx.iter().map(|&i| lam[i]));
    let mut v_sorted = DMatrix::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        v_sorted.set_column(col, &v.column(i));
    }
    Ok((lam_sorted, v_sorted))
}

/// Largest and smallest singular values of a real matrix.
pub fn singular_extremes(m: &DMatrix<f64>) -> Result<(f64, f64), LinalgError> {
    let gram = m.transpose() * m;
    let (lam, _) = jacobi_eigen(&gram)?;
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for &l in lam.iter() {
        hi = hi.max(l);
        lo = lo.min(l);
    }
    Ok((hi.max(0.0).sqrt(), lo.max(0.0).sqrt()))
}

/// Operator 2-norm (largest singular value) of a real matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    singular_extremes(m).expect("gram matrix is symmetric by construction").0
}

/// Real 2n x 2n representation of a complex matrix; it has the same operator
/// norm and twice the singular values.
pub fn complex_embed(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    let n = m.nrows();
    let c = m.ncols();
    let mut out = DMatrix::zeros(2 * n, 2 * c);
    for i in 0..n {
        for j in 0..c {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(i, j + c)] = -z.im;
            out[(i + n, j)] = z.im;
            out[(i + n, j + c)] = z.re;
        }
    }
    out
}

/// Operator 2-norm of a complex matrix.
pub fn complex_operator_norm(m: &DMatrix<Complex64>) -> f64 {
    operator_norm(&complex_embed(m))
}

/// Kronecker product of two real matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = (a.nrows(), a.ncols());
    let (br, bc) = (b.nrows(), b.ncols());
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Complex eigenvector of a real matrix for a known eigenvalue, by inverse
/// iteration with a slightly shifted LU solve.
pub fn complex_eigenvector(
    m: &DMatrix<f64>,
    lambda: Complex64,
) -> Result<DVector<Complex64>, LinalgError> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    let shift = lambda + Complex64::new(1e-10 * scale, 1e-10 * scale);
    let mut shifted = m.map(|x| Complex64::new(x, 0.0));
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut x = DVector::from_iterator(
        n,
        (0..n).map(|i| Complex64::new(1.0 + (i as f64) / (n as f64), 0.3 * (i as f64).sin())),
    );
    x /= Complex64::new(x.norm(), 0.0);
    for _ in 0..4 {
        let y = lu
            .solve(&x)
            .ok_or(LinalgError::NearSingular(1e14))?;
        let norm = y.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(LinalgError::NearSingular(1e14));
        }
        x = y / Complex64::new(norm, 0.0);
    }
    // residual check against the unshifted matrix
    let mx = m.map(|v| Complex64::new(v, 0.0)) * &x;
    let res = (&mx - x.clone() * lambda).norm();
    if res > 1e-6 * scale {
        return Err(LinalgError::NoConvergence(4));
    }
    Ok(x)
}

/// All eigenvalues of a general real square matrix.
pub fn dense_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}
