//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{PolarError, Result};

pub(crate) const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-9, 1e-8, 1e-6];

/// Cholesky factor of `a`, escalating diagonal jitter on failure.
pub(crate) fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = a
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for &jitter in &JITTER_LADDER {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter * scale;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter * scale));
        }
    }
    Err(PolarError::Numerical(
        "matrix is not positive definite after jitter escalation".into(),
    ))
}

pub(crate) fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// `x^T A^{-1} x` from a Cholesky factor of `A`.
pub(crate) fn inv_quad_form(chol: &Cholesky<f64, Dyn>, x: &[f64]) -> f64 {
    let l = chol.l_dirty();
    let n = x.len();
    // forward substitution on the lower factor
    let mut z = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        let mut v = x[i];
        for j in 0..i {
            v -= l[(i, j)] * z[j];
        }
        z[i] = v / l[(i, i)];
        acc += z[i] * z[i];
    }
    acc
}

/// Least squares `argmin ||X b - y||` by Householder QR. Returns `None` when
/// `R` is numerically rank deficient.
pub(crate) fn lstsq_qr(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = x.shape();
    if m < n {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = max_diag * (m.max(n) as f64) * f64::EPSILON * 1e3;
    if max_diag == 0.0 || r.diagonal().iter().any(|v| v.abs() <= tol) {
        return None;
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
}

/// Ridge least squares `(X^T X + λ I)^{-1} X^T y`.
pub(crate) fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let mut gram = x.transpose() * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let (chol, _) = cholesky_with_jitter(&gram)?;
    Ok(chol.solve(&(x.transpose() * y)))
}
