//! Maximum likelihood fit of the joint model.

use std::io::Write;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::likelihood::{
    cumulative_hazard, n_theta, params_from_theta, prep, JointObjective, Par, IDX_L21, IDX_LAMBDA, IDX_LOG_L11,
    IDX_LOG_L22, IDX_LOG_SIGMA,
};
use super::lmm::fit_lmm;
use super::optim::{fd_hessian, inverse_if_positive_definite, minimize, BfgsOptions};
use super::{JmData, JointModelSpec, JointParams};
use crate::cohort::CohortDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub params: JointParams,
    /// Standard errors on the natural scale (delta method).
    pub std_errors: JointParams,
    /// Estimates in optimiser coordinates.
    pub theta: Vec<f64>,
    /// Covariance of `theta`, row-major.
    pub covariance: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub n_subjects: usize,
    pub n_events: usize,
    /// Lower boundaries of the baseline pieces.
    pub breaks: Vec<f64>,
    pub quadrature_order: usize,
}

impl JointFit {
    /// Association estimate and its standard error.
    pub fn alpha(&self) -> (f64, f64) {
        (self.params.alpha, self.std_errors.alpha)
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// `(name, estimate, se)` for every parameter.
    pub fn report_rows(&self) -> Vec<(String, f64, f64)> {
        self.params
            .named()
            .into_iter()
            .zip(self.std_errors.named())
            .map(|((name, v), (_, se))| (name, v, se))
            .collect()
    }

    /// Flat key/value report as CSV.
    pub fn write_report<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["key", "value", "se"])?;
        for (name, v, se) in self.report_rows() {
            w.write_record([name, v.to_string(), se.to_string()])?;
        }
        for (k, v) in [
            ("loglik", self.loglik.to_string()),
            ("converged", self.converged.to_string()),
            ("iterations", self.iterations.to_string()),
            ("n_subjects", self.n_subjects.to_string()),
            ("n_events", self.n_events.to_string()),
            ("quadrature_order", self.quadrature_order.to_string()),
        ] {
            w.write_record([k, v.as_str(), ""])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits the joint model to `cohort`; with `exclude_all_missing` the subjects
/// flagged `omit` are dropped first.
pub fn fit_jm(cohort: &CohortDataset, spec: &JointModelSpec, exclude_all_missing: bool) -> Result<JointFit> {
    let data = JmData::from_cohort(cohort, spec, exclude_all_missing)?;
    fit_jm_data(&data, spec)
}

/// Piecewise-exponential fit with each subject's marker trajectory fixed at
/// `effects`; returns the survival coordinates `(ln lambda', g_f, g_o, alpha)`.
fn two_stage_survival(data: &JmData, base: &[f64], effects: &[[f64; 2]]) -> Result<Vec<f64>> {
    let k = data.n_pieces();
    let mut events = vec![0.0; k];
    let mut exposure = vec![0.0; k];
    for s in &data.subjects {
        if s.event {
            events[s.event_piece] += 1.0;
        }
        for g in &s.segments {
            exposure[g.piece] += g.width;
        }
    }
    let mut start: Vec<f64> = events.iter().zip(&exposure).map(|(e, x)| (e / x).max(1e-8).ln()).collect();
    start.extend([0.0, 0.0, 0.0]);

    let objective = |psi: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut theta = base.to_vec();
        theta[IDX_LAMBDA..].copy_from_slice(psi);
        let par = Par::new(&theta, k);
        let mut ll = 0.0;
        let mut g = vec![0.0; k + 3];
        let mut pieces = vec![0.0; k];
        for (s, u) in data.subjects.iter().zip(effects) {
            let pr = prep(&par, s, data.center, data.lag);
            pieces.iter_mut().for_each(|v| *v = 0.0);
            let hz = cumulative_hazard(&par, &pr, s, u[0], u[1], Some(&mut pieces));
            ll -= hz.h;
            for j in 0..k {
                g[j] -= pieces[j];
            }
            let p = pr.p0 + u[0];
            let slope = pr.s0 + u[1];
            let surv = s.event as u8 as f64 - hz.h;
            g[k] += s.female * surv;
            g[k + 1] += s.older * surv;
            g[k + 2] -= p * hz.h + slope * hz.h1;
            if s.event {
                let m_t = p + slope * pr.tau_t;
                ll += par.log_lambda[s.event_piece] + pr.eta + par.alpha * m_t;
                g[s.event_piece] += 1.0;
                g[k + 2] += m_t;
            }
        }
        (ll.is_finite()).then(|| (-ll, g.iter().map(|v| -v).collect()))
    };
    let res = minimize(objective, &start, None, &BfgsOptions::default())
        .ok_or_else(|| Error::Numerical("survival start-up fit undefined".into()))?;
    if !res.converged {
        debug!("two-stage survival fit stopped after {} iterations", res.iterations);
    }
    Ok(res.x)
}

/// Starting values from the mixed model and a two-stage survival fit.
fn initial_theta(data: &JmData) -> Result<Vec<f64>> {
    let lmm = fit_lmm(data)?;
    let k = data.n_pieces();
    // keep the covariance away from the boundary so the log-Cholesky
    // coordinates stay finite
    let var_a = lmm.var_a.max(1e-4 * lmm.sigma2);
    let l11 = var_a.sqrt();
    let l21 = lmm.cov_ab / l11;
    let var_b = lmm.var_b.max(l21 * l21 + 1e-4 * lmm.sigma2 / 10.0);
    let l22 = (var_b - l21 * l21).max(1e-6 * lmm.sigma2).sqrt();
    let mut theta = Vec::with_capacity(n_theta(k));
    theta.extend_from_slice(&lmm.beta);
    theta.extend([l11.ln(), l21, l22.ln(), 0.5 * lmm.sigma2.ln()]);
    theta.extend(std::iter::repeat_n(0.0, k + 3));
    let surv = two_stage_survival(data, &theta, &lmm.random_effects)?;
    theta[IDX_LAMBDA..].copy_from_slice(&surv);
    Ok(theta)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits the joint model to prepared data.
pub fn fit_jm_data(data: &JmData, spec: &JointModelSpec) -> Result<JointFit> {
    spec.validate()?;
    if data.n_events == 0 {
        return Err(Error::NoEvents);
    }
    let k = data.n_pieces();
    let mut theta = initial_theta(data)?;
    let mut objective = JointObjective::new(data, spec.quadrature_order, spec.parallel);
    let opts = BfgsOptions {
        max_iterations: spec.max_iterations,
        rel_tol: spec.rel_tol,
        grad_tol: spec.grad_tol,
    };

    let mut inverse_hessian: Option<Vec<f64>> = None;
    let mut previous = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut outer = 0;
    let mut settled = false;
    let mut last_grad = f64::INFINITY;
    let mut loglik = f64::NEG_INFINITY;
    while outer < spec.max_outer {
        outer += 1;
        objective.recenter(&theta)?;
        if inverse_hessian.is_none() {
            inverse_hessian = objective
                .score_outer_product(&theta)
                .and_then(|h| inverse_if_positive_definite(&h, theta.len()));
            if inverse_hessian.is_none() {
                debug!("score outer product is not positive definite");
            }
        }
        let res = minimize(
            |x| objective.value_and_gradient(x).map(|(v, g)| (-v, g.into_iter().map(|d| -d).collect())),
            &theta,
            inverse_hessian.as_deref(),
            &opts,
        )
        .ok_or_else(|| Error::Numerical("joint likelihood undefined at the starting values".into()))?;
        iterations += res.iterations;
        theta = res.x;
        loglik = -res.value;
        last_grad = max_abs(&res.gradient);
        inverse_hessian = res.converged.then_some(res.inverse_hessian);
        debug!(
            "outer {outer}: loglik {loglik:.8} after {} iterations, |g| {last_grad:.2e}",
            res.iterations
        );
        if !res.converged {
            if iterations >= spec.max_iterations {
                break;
            }
            // stalled at the rounding floor: settle when a Newton step on the
            // finite-difference curvature could not gain more than rel_tol
            let neg_grad = |x: &[f64]| objective.value_and_gradient(x).map(|(_, g)| g.into_iter().map(|d| -d).collect());
            let p = theta.len();
            let curvature = fd_hessian(neg_grad, &theta, 1e-5).and_then(|h| inverse_if_positive_definite(&h, p));
            if let Some(inv) = curvature {
                let g = &res.gradient;
                let gain = 0.5 * (0..p).map(|i| g[i] * (0..p).map(|j| inv[i * p + j] * g[j]).sum::<f64>()).sum::<f64>();
                debug!("outer {outer}: predicted Newton gain {gain:.2e}");
                if gain <= spec.rel_tol * loglik.abs().max(1.0) {
                    settled = true;
                    break;
                }
                inverse_hessian = Some(inv);
            }
            continue;
        }
        if (loglik - previous).abs() <= spec.rel_tol * loglik.abs().max(1.0) || res.iterations == 0 {
            settled = true;
            break;
        }
        previous = loglik;
    }
    if !settled {
        return Err(Error::NonConvergence {
            iterations,
            loglik,
            grad_norm: last_grad,
        });
    }

    // observed information at the estimate, nodes centred there
    objective.recenter(&theta)?;
    let (loglik, _) = objective
        .value_and_gradient(&theta)
        .ok_or_else(|| Error::Numerical("log-likelihood not finite at the estimate".into()))?;
    let p = theta.len();
    let neg_grad = |x: &[f64]| objective.value_and_gradient(x).map(|(_, g)| g.into_iter().map(|d| -d).collect());
    let hess = fd_hessian(neg_grad, &theta, 1e-4)
        .ok_or_else(|| Error::Numerical("gradient undefined near the estimate".into()))?;
    let info = DMatrix::from_row_slice(p, p, &hess);
    let cov = info
        .cholesky()
        .ok_or_else(|| Error::Numerical("observed information is not positive definite".into()))?
        .inverse();

    let params = params_from_theta(&theta, k, data.center);
    let std_errors = natural_std_errors(&theta, &cov, k, data.center);
    if std_errors.named().iter().any(|(_, v)| !v.is_finite()) {
        warn!("non-finite standard error in the joint model fit");
    }
    Ok(JointFit {
        params,
        std_errors,
        covariance: cov.transpose().iter().copied().collect(),
        theta,
        loglik,
        converged: true,
        iterations,
        outer_iterations: outer,
        n_subjects: data.n_subjects(),
        n_events: data.n_events,
        breaks: data.breaks.clone(),
        quadrature_order: spec.quadrature_order,
    })
}

/// Delta-method standard errors of the natural-scale parameters.
fn natural_std_errors(theta: &[f64], cov: &DMatrix<f64>, k: usize, center: f64) -> JointParams {
    let p = theta.len();
    let par = Par::new(theta, k);
    let ia = IDX_LAMBDA + k + 2;
    // gradient of one natural parameter w.r.t. theta
    let se = |grad: &[(usize, f64)]| -> f64 {
        let mut v = 0.0;
        for &(i, gi) in grad {
            for &(j, gj) in grad {
                v += gi * gj * cov[(i, j)];
            }
        }
        v.max(0.0).sqrt()
    };
    let _ = p;
    let (l11, l21, l22) = (par.l11, par.l21, par.l22);
    JointParams {
        beta: [se(&[(0, 1.0)]), se(&[(1, 1.0)]), se(&[(2, 1.0)]), se(&[(3, 1.0)])],
        var_a: se(&[(IDX_LOG_L11, 2.0 * l11 * l11)]),
        cov_ab: se(&[(IDX_LOG_L11, l11 * l21), (IDX_L21, l11)]),
        var_b: se(&[(IDX_L21, 2.0 * l21), (IDX_LOG_L22, 2.0 * l22 * l22)]),
        sigma2: se(&[(IDX_LOG_SIGMA, 2.0 / par.inv_s2)]),
        baseline: (0..k)
            .map(|j| {
                let lam = (par.log_lambda[j] - par.alpha * center).exp();
                se(&[(IDX_LAMBDA + j, lam), (ia, -center * lam)])
            })
            .collect(),
        gamma_female: se(&[(IDX_LAMBDA + k, 1.0)]),
        gamma_older: se(&[(IDX_LAMBDA + k + 1, 1.0)]),
        alpha: se(&[(ia, 1.0)]),
    }
}
