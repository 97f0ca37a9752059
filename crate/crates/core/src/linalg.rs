//! Small dense symmetric solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted by [`solve_symmetric`].
pub const MAX_CONDITION: f64 = 1e12;

/// Solves `a x = b` for symmetric positive definite `a`, refusing matrices
/// whose 2-norm condition number exceeds [`MAX_CONDITION`].
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() || max / min > MAX_CONDITION {
        return Err(Error::Singular(format!("{what}: condition number {:.3e}", max / min)));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what}: not positive definite")))?;
    Ok(chol.solve(b))
}

/// `sum_i w_i x_i x_i'` over the columns-of-rows layout used by designs.
pub fn weighted_crossprod(cols: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let k = cols.len();
    let mut m = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let s: f64 = cols[a].iter().zip(&cols[b]).zip(w).map(|((u, v), w)| u * v * w).sum();
            m[(a, b)] = s;
            m[(b, a)] = s;
        }
    }
    m
}

/// `sum_i r_i x_i` for a residual-like vector `r`.
pub fn weighted_colsum(cols: &[Vec<f64>], r: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        cols.len(),
        cols.iter().map(|c| c.iter().zip(r).map(|(x, r)| x * r).sum::<f64>()),
    )
}
