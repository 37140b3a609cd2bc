//! Dense symmetric linear algebra helpers.
//!
//! The Cholesky factorization here is hand-written so that (a) failures report
//! the first non-positive pivot index and (b) the factor of a leading
//! principal block is computed by exactly the same floating-point operations
//! as the factor of the full matrix, which makes per-step reward truncation
//! bit-exact. Eigenvalue routines delegate to nalgebra and serve as the
//! independent route for log-determinant and rank checks.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CigError, Result};

/// Lower-triangular Cholesky factor of a symmetric matrix stored row-major.
///
/// Returns the flat row-major factor `L` with `A = L * L^T`. Fails with the
/// 0-based index of the first pivot that is not strictly positive; the pivot
/// is never clamped.
pub fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix buffer must be n*n");
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        diag -= dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if diag <= 0.0 || !diag.is_finite() {
            return Err(CigError::NotPositiveDefinite { pivot: j });
        }
        let piv = diag.sqrt();
        l[j * n + j] = piv;
        for i in (j + 1)..n {
            let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / piv;
        }
    }
    Ok(l)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += a * b;
    }
    s
}

/// Log-determinant via the hand-written Cholesky route.
pub fn logdet_cholesky(a: &[f64], n: usize) -> Result<f64> {
    let l = cholesky_lower(a, n)?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += 2.0 * l[i * n + i].ln();
    }
    Ok(acc)
}

/// Eigenvalues of a symmetric matrix, descending. Independent oracle route.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    vals
}

/// Log-determinant through the eigenvalue route; oracle counterpart of
/// [`logdet_cholesky`].
pub fn logdet_eigen(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).iter().map(|v| v.ln()).sum()
}

/// Numerical rank: eigenvalues above `rel_tol * lambda_max` count. A matrix
/// whose largest eigenvalue is not positive has rank 0.
pub fn numerical_rank(eigenvalues: &[f64], rel_tol: f64) -> usize {
    let lambda_max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lambda_max <= 0.0 || lambda_max.is_nan() {
        return 0;
    }
    let thresh = rel_tol * lambda_max;
    eigenvalues.iter().filter(|v| **v > thresh).count()
}

/// Row-major copy of a nalgebra matrix (nalgebra stores column-major).
pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = a.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = a[(i, j)];
        }
    }
    out
}
