//! Posterior draws for a normal linear regression under the improper prior
//! `p(theta, log sigma^2) ∝ 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative pivot below which a column is treated as a linear combination
/// of the columns kept before it.
const COLLINEARITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RegressionDraw {
    /// Indices of design columns that entered the fit, in input order.
    pub kept: Vec<usize>,
    /// Columns dropped as collinear with earlier columns.
    pub dropped: Vec<usize>,
    /// Least-squares coefficients for the kept columns.
    pub ls_estimate: Vec<f64>,
    /// `RSS / (n - k)`.
    pub sigma2_hat: f64,
    /// `(X'X)^{-1}` over the kept columns.
    pub xtx_inv: DMatrix<f64>,
    /// Drawn coefficients for the kept columns.
    pub coefficients: Vec<f64>,
    /// Drawn residual variance.
    pub residual_variance: f64,
}

impl RegressionDraw {
    /// Linear predictor for a full-width design row (dropped columns ignored).
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.kept
            .iter()
            .zip(&self.coefficients)
            .map(|(&c, &b)| row[c] * b)
            .sum()
    }
}

/// Greedy in-order Cholesky of `X'X`: a column whose remaining pivot is
/// negligible relative to its own sum of squares is dropped, so later
/// columns go before earlier ones.
pub(crate) fn select_columns(xtx: &DMatrix<f64>) -> (Vec<usize>, Vec<usize>) {
    let k = xtx.nrows();
    let mut kept: Vec<usize> = Vec::with_capacity(k);
    let mut dropped = Vec::new();
    // rows of the lower Cholesky factor over kept columns
    let mut l: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let diag = xtx[(c, c)];
        if !(diag > 0.0) {
            dropped.push(c);
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (r, &kc) in kept.iter().enumerate() {
            let s: f64 = (0..r).map(|q| row[q] * l[r][q]).sum();
            row.push((xtx[(c, kc)] - s) / l[r][r]);
        }
        let pivot = diag - row.iter().map(|v| v * v).sum::<f64>();
        if pivot <= COLLINEARITY_TOL * diag {
            dropped.push(c);
            continue;
        }
        row.push(pivot.sqrt());
        l.push(row);
        kept.push(c);
    }
    (kept, dropped)
}

/// Least-squares fit and one posterior draw of `(theta, sigma^2)`.
///
/// `sigma^2 = RSS / chi2_{n-k}` and `theta ~ N(theta_hat, sigma^2 (X'X)^{-1})`.
/// Collinear columns are dropped before fitting.
pub fn draw_bayes_regression<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &[f64],
    rng: &mut R,
) -> Result<RegressionDraw> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Config(format!("design has {n} rows, response has {}", y.len())));
    }
    let xtx_full = x.transpose() * x;
    let (kept, dropped) = select_columns(&xtx_full);
    let k = kept.len();
    if n <= k {
        return Err(Error::Numerical(format!(
            "{n} complete cases cannot support {k} regression coefficients"
        )));
    }
    let xk = x.select_columns(&kept);
    let yv = DVector::from_column_slice(y);
    let xtx = xk.transpose() * &xk;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("X'X not positive definite after column selection".into()))?;
    let xty = xk.transpose() * &yv;
    let beta = chol.solve(&xty);
    let resid = &yv - &xk * &beta;
    let rss = resid.norm_squared();
    let dof = (n - k) as f64;
    let sigma2_hat = rss / dof;

    let chi2 = ChiSquared::new(dof).map_err(|e| Error::Numerical(e.to_string()))?;
    let residual_variance = rss / chi2.sample(rng);
    let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    // theta - theta_hat = sigma L^{-T} z has covariance sigma^2 (L L')^{-1}
    let lt = chol.l().transpose();
    let shift = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let sigma = residual_variance.sqrt();
    let coefficients: Vec<f64> = beta.iter().zip(shift.iter()).map(|(b, s)| b + sigma * s).collect();

    Ok(RegressionDraw {
        kept,
        dropped,
        ls_estimate: beta.iter().copied().collect(),
        sigma2_hat,
        xtx_inv: chol.inverse(),
        coefficients,
        residual_variance,
    })
}
