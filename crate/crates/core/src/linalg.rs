//! Small dense solvers used by the factorization and projection code.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const SVD_EPS: f64 = 1e-12;

/// Solves the symmetric positive semi-definite system `a x = b`.
///
/// Uses a Cholesky factorization and falls back to the minimum-norm
/// pseudo-inverse solution when `a` is singular.
pub fn solve_psd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let svd = a.svd(true, true);
    let tol = SVD_EPS * svd.singular_values.max().max(1.0);
    svd.solve(b, tol).map_err(|e| Error::Numeric(e.to_string()))
}

/// Minimum-norm solution of `min ‖a x − b‖² + λ‖x‖²` computed through an
/// SVD of the ridge-augmented system `[a; √λ I] x ≈ [b; 0]`.
pub fn ridge_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    let (aug, rhs) = if lambda > 0.0 {
        let mut aug = DMatrix::zeros(rows + cols, cols);
        aug.view_mut((0, 0), (rows, cols)).copy_from(a);
        let s = lambda.sqrt();
        for j in 0..cols {
            aug[(rows + j, j)] = s;
        }
        let mut rhs = DVector::zeros(rows + cols);
        rhs.rows_mut(0, rows).copy_from(b);
        (aug, rhs)
    } else {
        (a.clone(), b.clone())
    };
    let svd = aug.svd(true, true);
    let tol = SVD_EPS * svd.singular_values.max().max(1.0);
    svd.solve(&rhs, tol).map_err(|e| Error::Numeric(e.to_string()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
