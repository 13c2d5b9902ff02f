//! Small dense linear-algebra helpers around nalgebra's Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter of the first retry, as a fraction of the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Number of jittered retries after the plain factorisation fails.
pub const JITTER_RETRIES: usize = 3;

/// A Cholesky factor together with the diagonal jitter that was needed.
#[derive(Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `x^T A^{-1} x` via one triangular solve.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.half_solve(x).norm_squared()
    }

    /// `L^{-1} x`.
    pub fn half_solve(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L z` for the lower factor.
    pub fn lower_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = z.len();
        let mut out = DVector::zeros(n);
        for k in 0..n {
            let zk = z[k];
            let col = l.column(k);
            for i in k..n {
                out[i] += col[i] * zk;
            }
        }
        out
    }
}

/// Cholesky with escalating diagonal jitter: `JITTER_START * mean(diag)`,
/// multiplied by ten on each of `JITTER_RETRIES` retries.
pub fn cholesky_jittered(m: DMatrix<f64>) -> Result<Factor> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("matrix is {}x{}, not square", n, m.ncols())));
    }
    if n == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::LinearAlgebra("matrix has non-finite entries".into()));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START * mean_diag;
    for _ in 0..JITTER_RETRIES {
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(mj) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::LinearAlgebra(format!(
        "{n}x{n} matrix not positive definite after jitter up to {:.3e}",
        jitter / 10.0
    )))
}
