//! Quasi-Newton minimisation (BFGS on the inverse Hessian) with a
//! backtracking Armijo line search.

use log::debug;

/// Relative objective change treated as rounding noise.
pub const FLAT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Relative change of the objective between iterations.
    pub rel_tol: f64,
    /// Max-norm of the gradient.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_tol: 1e-8,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final inverse-Hessian approximation, row-major.
    pub inverse_hessian: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `f`, which returns the value and gradient or `None` where the
/// objective is undefined. `h0` is an optional starting inverse Hessian.
pub fn minimize<F>(mut f: F, x0: &[f64], h0: Option<&[f64]>, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let identity = |scale: f64| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = scale;
        }
        h
    };
    let mut h = match h0 {
        Some(h0) if h0.len() == n * n => h0.to_vec(),
        _ => identity(1.0 / max_abs(&g).max(1.0)),
    };
    let mut fresh_h = h0.is_none();
    let mut iterations = 0;
    let mut converged = max_abs(&g) < opts.grad_tol;
    let mut resets = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            h = identity(1.0 / max_abs(&g).max(1.0));
            fresh_h = true;
            d = g.iter().map(|v| -v / max_abs(&g).max(1.0)).collect();
            slope = dot(&d, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            match f(&xn) {
                Some((fnew, gnew)) if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) => {
                    // near the optimum the decrease drowns in rounding of f;
                    // a smaller gradient then decides
                    let flat = fnew <= fx + FLAT_TOL * fx.abs().max(1.0) && max_abs(&gnew) < 0.5 * max_abs(&g);
                    if (fnew < fx && fnew <= fx + 1e-4 * step * slope) || flat {
                        accepted = Some((xn, fnew, gnew));
                        break;
                    }
                    // safeguarded quadratic interpolation
                    let denom = 2.0 * (fnew - fx - step * slope);
                    let trial = if denom > 0.0 { -slope * step * step / denom } else { 0.5 * step };
                    step = trial.clamp(0.1 * step, 0.5 * step);
                }
                _ => step *= 0.2,
            }
        }

        let Some((xn, fnew, gnew)) = accepted else {
            if resets == 0 && !fresh_h {
                debug!("line search failed, resetting the inverse Hessian");
                h = identity(1.0 / max_abs(&g).max(1.0));
                fresh_h = true;
                resets += 1;
                continue;
            }
            debug!("line search failed at |g| = {:.3e}", max_abs(&g));
            // no representable decrease left: stationary if the gradient agrees
            converged = max_abs(&g) < opts.grad_tol;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let change = (fx - fnew).abs();
        x = xn;
        g = gnew;
        let prev = fx;
        fx = fnew;

        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                let scale = sy / dot(&y, &y);
                h = identity(scale);
                fresh_h = false;
            }
            // H+ = (I - r s y') H (I - r y s') + r s s'
            let r = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
                }
            }
        }

        let gmax = max_abs(&g);
        if gmax < opts.grad_tol && change <= opts.rel_tol * prev.abs().max(1.0) {
            converged = true;
        } else if gmax < 0.1 * opts.grad_tol {
            converged = true;
        }
    }

    Some(BfgsResult {
        x,
        value: fx,
        gradient: g,
        iterations,
        converged,
        inverse_hessian: h,
    })
}

/// BFGS started from the inverse of a finite-difference Hessian, restarted
/// from a fresh one at the last iterate when it stalls.
pub fn minimize_with_restarts<F>(f: F, x0: &[f64], opts: &BfgsOptions, max_restarts: usize) -> Option<BfgsResult>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut iterations = 0;
    let mut last = None;
    for attempt in 0..=max_restarts {
        let h0 = fd_hessian(|z| f(z).map(|r| r.1), &x, 1e-5).and_then(|h| inverse_if_positive_definite(&h, n));
        if h0.is_none() {
            debug!("finite-difference curvature not positive definite at restart {attempt}");
        }
        let mut res = minimize(&f, &x, h0.as_deref(), opts)?;
        iterations += res.iterations;
        res.iterations = iterations;
        x = res.x.clone();
        let done = res.converged;
        last = Some(res);
        if done {
            break;
        }
    }
    last
}

/// Central-difference Hessian of a gradient, symmetrised, row-major.
pub fn fd_hessian<G>(mut grad: G, x: &[f64], rel_step: f64) -> Option<Vec<f64>>
where
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let n = x.len();
    let mut h = vec![0.0; n * n];
    for j in 0..n {
        let step = rel_step * x[j].abs().max(1.0);
        let mut up = x.to_vec();
        up[j] += step;
        let mut dn = x.to_vec();
        dn[j] -= step;
        let gu = grad(&up)?;
        let gd = grad(&dn)?;
        for i in 0..n {
            h[i * n + j] = (gu[i] - gd[i]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = m;
            h[j * n + i] = m;
        }
    }
    Some(h)
}

/// Inverse of a symmetric matrix when it is positive definite.
pub fn inverse_if_positive_definite(h: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = nalgebra::DMatrix::from_row_slice(n, n, h);
    let inv = m.cholesky()?.inverse();
    Some(inv.transpose().iter().copied().collect())
}
