//! Symmetric positive-definite helpers built on Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Cholesky factor of `a`, retrying with diagonal jitter from 1e-10 up to
/// 1e-6 (times the mean diagonal magnitude) before giving up.
pub fn cholesky(a: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        (a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1.0)
    };
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(context))
}

/// Inverse of an SPD matrix, returned exactly symmetric.
pub fn spd_inverse(a: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let inv = cholesky(a, context)?.inverse();
    Ok(symmetrize(inv))
}

/// Log-determinant of an SPD matrix.
pub fn spd_logdet(a: &DMatrix<f64>, context: &'static str) -> Result<f64> {
    let c = cholesky(a, context)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Removes row and column `k` from a square matrix.
pub fn drop_row_col(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    a.clone().remove_row(k).remove_column(k)
}
