//! Marginal log-likelihood of the joint model by adaptive Gauss-Hermite
//! quadrature, with its analytic gradient. The random effects are integrated
//! on the standardised scale `z`, `(a_i, b_i) = L z`, so the nodes stay
//! meaningful as `D` approaches singularity.
//!
//! Optimiser coordinates `theta`:
//! `[b0, b1, b2, b3, ln L11, L21, ln L22, ln sigma, ln lambda'_1..K, g_f, g_o, alpha]`
//! where `D = L L'` and `lambda'_k = lambda_k exp(alpha * center)`, i.e. the
//! hazard uses the marker minus `JmData::center`.

use std::f64::consts::{LN_2, SQRT_2};

use rayon::prelude::*;

use super::quadrature::{exp_moments_with, GaussHermite2d};
use super::{JmData, JmSubject, JointParams};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) const IDX_LOG_L11: usize = 4;
pub(crate) const IDX_L21: usize = 5;
pub(crate) const IDX_LOG_L22: usize = 6;
pub(crate) const IDX_LOG_SIGMA: usize = 7;
pub(crate) const IDX_LAMBDA: usize = 8;

pub(crate) fn n_theta(n_pieces: usize) -> usize {
    IDX_LAMBDA + n_pieces + 3
}

/// Unpacked coordinates with derived quantities.
#[derive(Debug, Clone)]
pub(crate) struct Par {
    pub beta: [f64; 4],
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
    pub log_sigma: f64,
    pub inv_s2: f64,
    pub log_lambda: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma_f: f64,
    pub gamma_o: f64,
    pub alpha: f64,
}

impl Par {
    pub fn new(theta: &[f64], n_pieces: usize) -> Self {
        let k = n_pieces;
        let l11 = theta[IDX_LOG_L11].exp();
        let l21 = theta[IDX_L21];
        let l22 = theta[IDX_LOG_L22].exp();
        let log_lambda = theta[IDX_LAMBDA..IDX_LAMBDA + k].to_vec();
        Self {
            beta: [theta[0], theta[1], theta[2], theta[3]],
            l11,
            l21,
            l22,
            log_sigma: theta[IDX_LOG_SIGMA],
            inv_s2: (-2.0 * theta[IDX_LOG_SIGMA]).exp(),
            lambda: log_lambda.iter().map(|v| v.exp()).collect(),
            log_lambda,
            gamma_f: theta[IDX_LAMBDA + k],
            gamma_o: theta[IDX_LAMBDA + k + 1],
            alpha: theta[IDX_LAMBDA + k + 2],
        }
    }

    /// Random effects `L z`.
    #[inline]
    pub fn effects(&self, z: [f64; 2]) -> (f64, f64) {
        (self.l11 * z[0], self.l21 * z[0] + self.l22 * z[1])
    }
}

/// Natural-scale parameters to optimiser coordinates.
pub(crate) fn theta_from_params(p: &JointParams, n_pieces: usize, center: f64) -> Result<Vec<f64>> {
    if !(p.sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 = {} is not positive", p.sigma2)));
    }
    if p.baseline.len() != n_pieces {
        return Err(Error::Domain(format!(
            "{} baseline values for {n_pieces} pieces",
            p.baseline.len()
        )));
    }
    if p.baseline.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Domain("baseline hazard must be positive".into()));
    }
    let (l11, l21, l22) = p.cholesky()?;
    let mut theta = Vec::with_capacity(n_theta(n_pieces));
    theta.extend_from_slice(&p.beta);
    theta.extend([l11.ln(), l21, l22.ln(), 0.5 * p.sigma2.ln()]);
    theta.extend(p.baseline.iter().map(|l| l.ln() + p.alpha * center));
    theta.extend([p.gamma_female, p.gamma_older, p.alpha]);
    Ok(theta)
}

pub(crate) fn params_from_theta(theta: &[f64], n_pieces: usize, center: f64) -> JointParams {
    let par = Par::new(theta, n_pieces);
    JointParams {
        beta: par.beta,
        var_a: par.l11 * par.l11,
        cov_ab: par.l11 * par.l21,
        var_b: par.l21 * par.l21 + par.l22 * par.l22,
        sigma2: 1.0 / par.inv_s2,
        baseline: par.log_lambda.iter().map(|l| (l - par.alpha * center).exp()).collect(),
        gamma_female: par.gamma_f,
        gamma_older: par.gamma_o,
        alpha: par.alpha,
    }
}

/// Subject quantities that depend on `theta` but not on the random effects.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prep {
    pub n: f64,
    pub st: f64,
    pub stt: f64,
    /// Residual sums at `(a, b) = 0`: `Σ r`, `Σ r t`, `Σ r^2`.
    pub sr: f64,
    pub srt: f64,
    pub srr: f64,
    /// Centered marker intercept and slope at `(a, b) = 0`.
    pub p0: f64,
    pub s0: f64,
    pub eta: f64,
    pub exp_eta: f64,
    pub ev: f64,
    pub tau_t: f64,
}

pub(crate) fn prep(par: &Par, s: &JmSubject, center: f64, lag: f64) -> Prep {
    let mu = par.beta[0] + par.beta[2] * s.female + par.beta[3] * s.older;
    let (mut sr, mut srt, mut srr) = (0.0, 0.0, 0.0);
    for (t, y) in s.times.iter().zip(&s.values) {
        let r = y - mu - par.beta[1] * t;
        sr += r;
        srt += r * t;
        srr += r * r;
    }
    let eta = par.gamma_f * s.female + par.gamma_o * s.older;
    Prep {
        n: s.times.len() as f64,
        st: s.sum_t,
        stt: s.sum_tt,
        sr,
        srt,
        srr,
        p0: mu - center,
        s0: par.beta[1],
        eta,
        exp_eta: eta.exp(),
        ev: f64::from(u8::from(s.event)),
        tau_t: s.time - lag,
    }
}

/// Cumulative hazard `H = ∫ h`, and `H1 = ∫ tau h`, `H2 = ∫ tau^2 h` in lagged
/// time. With `pieces`, per-piece contributions to `H` are added to it.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Hazard {
    pub h: f64,
    pub h1: f64,
    pub h2: f64,
}

#[inline]
pub(crate) fn cumulative_hazard(
    par: &Par,
    pr: &Prep,
    s: &JmSubject,
    a: f64,
    b: f64,
    mut pieces: Option<&mut [f64]>,
) -> Hazard {
    let p = pr.p0 + a;
    let slope = pr.s0 + b;
    let kappa = par.alpha * slope;
    let mut unit: Option<([f64; 3], f64)> = None;
    let mut e = f64::NAN;
    let mut out = Hazard::default();
    for (i, seg) in s.segments.iter().enumerate() {
        if i == 0 {
            e = (par.alpha * (p + slope * seg.tau0)).exp();
        }
        let w = seg.width;
        let (psi, ez) = if w == 1.0 {
            *unit.get_or_insert_with(|| {
                let ez = kappa.exp();
                (exp_moments_with(kappa, ez), ez)
            })
        } else {
            let z = kappa * w;
            let ez = z.exp();
            (exp_moments_with(z, ez), ez)
        };
        let lam = par.lambda[seg.piece] * pr.exp_eta;
        let we = w * e * lam;
        let t0 = seg.tau0;
        let e0 = we * psi[0];
        out.h += e0;
        out.h1 += we * (t0 * psi[0] + w * psi[1]);
        out.h2 += we * (t0 * t0 * psi[0] + 2.0 * t0 * w * psi[1] + w * w * psi[2]);
        if let Some(pc) = pieces.as_deref_mut() {
            pc[seg.piece] += e0;
        }
        e *= ez;
    }
    out
}

/// Log of the integrand at `z`: longitudinal density times standard normal
/// density times survival contribution. Also returns `(a, b)`, the residual
/// sum of squares and the score of the longitudinal and survival terms with
/// respect to `(a, b)`.
#[inline]
fn log_integrand(par: &Par, pr: &Prep, s: &JmSubject, z: [f64; 2], hz: &Hazard) -> Integrand {
    let (a, b) = par.effects(z);
    let rss = pr.srr - 2.0 * a * pr.sr - 2.0 * b * pr.srt + a * a * pr.n + 2.0 * a * b * pr.st + b * b * pr.stt;
    let mut g = -0.5 * pr.n * LN_2PI - pr.n * par.log_sigma - 0.5 * rss * par.inv_s2 - LN_2PI
        - 0.5 * (z[0] * z[0] + z[1] * z[1])
        - hz.h;
    if pr.ev > 0.0 {
        let m_t = pr.p0 + a + (pr.s0 + b) * pr.tau_t;
        g += par.log_lambda[s.event_piece] + pr.eta + par.alpha * m_t;
    }
    let r0 = pr.sr - a * pr.n - b * pr.st;
    let r1 = pr.srt - a * pr.st - b * pr.stt;
    let al = par.alpha;
    Integrand {
        value: g,
        a,
        b,
        rss,
        r0,
        r1,
        d_a: r0 * par.inv_s2 + al * (pr.ev - hz.h),
        d_b: r1 * par.inv_s2 + al * (pr.ev * pr.tau_t - hz.h1),
    }
}

struct Integrand {
    value: f64,
    a: f64,
    b: f64,
    rss: f64,
    r0: f64,
    r1: f64,
    d_a: f64,
    d_b: f64,
}

/// Posterior mode of `z` and the negative Hessian `(h11, h12, h22)` of the
/// log-integrand there.
pub(crate) fn find_mode(par: &Par, pr: &Prep, s: &JmSubject, start: [f64; 2]) -> Result<([f64; 2], [f64; 3])> {
    let (l11, l21, l22) = (par.l11, par.l21, par.l22);
    let eval = |z: [f64; 2]| {
        let (a, b) = par.effects(z);
        let hz = cumulative_hazard(par, pr, s, a, b, None);
        let it = log_integrand(par, pr, s, z, &hz);
        // chain rule through (a, b) = L z
        let grad = [l11 * it.d_a + l21 * it.d_b - z[0], l22 * it.d_b - z[1]];
        let a2 = par.alpha * par.alpha;
        let (u11, u12, u22) = (
            pr.n * par.inv_s2 + a2 * hz.h,
            pr.st * par.inv_s2 + a2 * hz.h1,
            pr.stt * par.inv_s2 + a2 * hz.h2,
        );
        // L' U L + I
        let neg_hess = [
            l11 * l11 * u11 + 2.0 * l11 * l21 * u12 + l21 * l21 * u22 + 1.0,
            l22 * (l11 * u12 + l21 * u22),
            l22 * l22 * u22 + 1.0,
        ];
        (it.value, grad, neg_hess)
    };
    let mut u = start;
    let (mut g, mut grad, mut nh) = eval(u);
    for _ in 0..100 {
        let det = nh[0] * nh[2] - nh[1] * nh[1];
        if !(det > 0.0) || !g.is_finite() {
            return Err(Error::Numerical(format!("subject {}: random-effects mode search failed", s.id)));
        }
        let step = [(nh[2] * grad[0] - nh[1] * grad[1]) / det, (nh[0] * grad[1] - nh[1] * grad[0]) / det];
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial = [u[0] + t * step[0], u[1] + t * step[1]];
            let (gt, gradt, nht) = eval(trial);
            if gt.is_finite() && gt >= g - 1e-12 * g.abs() {
                u = trial;
                g = gt;
                grad = gradt;
                nh = nht;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        let size = (t * step[0]).abs().max((t * step[1]).abs());
        if !moved || size < 1e-10 {
            break;
        }
    }
    Ok((u, nh))
}

/// Marginal likelihood with node sets held fixed between re-centerings.
#[derive(Debug, Clone)]
pub struct JointObjective<'a> {
    data: &'a JmData,
    rule: GaussHermite2d,
    /// Standardised modes.
    modes: Vec<[f64; 2]>,
    /// Modes of `(a, b)`.
    effects: Vec<[f64; 2]>,
    /// Per subject: `(z1, z2, log weight)` of each node.
    nodes: Vec<Vec<(f64, f64, f64)>>,
    parallel: bool,
}

impl<'a> JointObjective<'a> {
    pub fn new(data: &'a JmData, order: usize, parallel: bool) -> Self {
        Self {
            data,
            rule: GaussHermite2d::new(order),
            modes: vec![[0.0; 2]; data.subjects.len()],
            effects: Vec::new(),
            nodes: Vec::new(),
            parallel,
        }
    }

    pub fn n_params(&self) -> usize {
        n_theta(self.data.n_pieces())
    }

    /// Optimiser coordinates of natural-scale parameters for this data.
    pub fn theta(&self, params: &JointParams) -> Result<Vec<f64>> {
        theta_from_params(params, self.data.n_pieces(), self.data.center)
    }

    pub fn params(&self, theta: &[f64]) -> JointParams {
        params_from_theta(theta, self.data.n_pieces(), self.data.center)
    }

    /// Posterior modes of `(a_i, b_i)` at the last re-centering.
    pub fn modes(&self) -> &[[f64; 2]] {
        &self.effects
    }

    /// Centres each subject's nodes at its posterior mode under `theta` and
    /// scales them by the curvature there.
    pub fn recenter(&mut self, theta: &[f64]) -> Result<()> {
        let data = self.data;
        let par = Par::new(theta, data.n_pieces());
        let rule = &self.rule;
        let work = |(s, start): (&JmSubject, &[f64; 2])| -> Result<([f64; 2], Vec<(f64, f64, f64)>)> {
            let pr = prep(&par, s, data.center, data.lag);
            let (mode, nh) = find_mode(&par, &pr, s, *start)?;
            let det = nh[0] * nh[2] - nh[1] * nh[1];
            // covariance = inverse of the negative Hessian, then its Cholesky factor
            let (s11, s12, s22) = (nh[2] / det, -nh[1] / det, nh[0] / det);
            let c11 = s11.sqrt();
            let c21 = s12 / c11;
            let c22 = (s22 - c21 * c21).sqrt();
            let shift = LN_2 + c11.ln() + c22.ln();
            let nodes = rule
                .points
                .iter()
                .map(|&(z1, z2, lw)| {
                    (
                        mode[0] + SQRT_2 * c11 * z1,
                        mode[1] + SQRT_2 * (c21 * z1 + c22 * z2),
                        lw + shift,
                    )
                })
                .collect();
            Ok((mode, nodes))
        };
        let results: Vec<Result<_>> = if self.parallel {
            data.subjects.par_iter().zip(self.modes.par_iter()).map(work).collect()
        } else {
            data.subjects.iter().zip(self.modes.iter()).map(work).collect()
        };
        let mut modes = Vec::with_capacity(results.len());
        let mut nodes = Vec::with_capacity(results.len());
        for r in results {
            let (m, n) = r?;
            modes.push(m);
            nodes.push(n);
        }
        self.effects = modes
            .iter()
            .map(|&z| {
                let (a, b) = par.effects(z);
                [a, b]
            })
            .collect();
        self.modes = modes;
        self.nodes = nodes;
        Ok(())
    }

    fn subject(&self, par: &Par, i: usize, grad: &mut [f64], buf: &mut Vec<f64>) -> f64 {
        let data = self.data;
        let s = &data.subjects[i];
        let k = data.n_pieces();
        let pr = prep(par, s, data.center, data.lag);
        let nodes = &self.nodes[i];
        // per node: lw + g, r0, r1, then the L-coordinate scores, rss, H, H1,
        // p H + s H1, a, b, H_k...
        let width = 12 + k;
        buf.clear();
        buf.resize(width * nodes.len(), 0.0);
        let mut top = f64::NEG_INFINITY;
        for (q, &(z1, z2, lw)) in nodes.iter().enumerate() {
            let row = &mut buf[q * width..(q + 1) * width];
            let (a, b) = par.effects([z1, z2]);
            let hz = cumulative_hazard(par, &pr, s, a, b, Some(&mut row[12..]));
            let it = log_integrand(par, &pr, s, [z1, z2], &hz);
            row[0] = lw + it.value;
            row[1] = it.r0;
            row[2] = it.r1;
            row[3] = it.d_a * it.a;
            row[4] = it.d_b * z1;
            row[5] = it.d_b * par.l22 * z2;
            row[6] = it.rss;
            row[7] = hz.h;
            row[8] = hz.h1;
            row[9] = (pr.p0 + a) * hz.h + (pr.s0 + b) * hz.h1;
            row[10] = it.a;
            row[11] = it.b;
            top = top.max(row[0]);
        }
        let mut total = 0.0;
        let mut mean = vec![0.0; width];
        for row in buf.chunks_exact(width) {
            let w = (row[0] - top).exp();
            total += w;
            for (m, v) in mean.iter_mut().zip(row).skip(1) {
                *m += w * v;
            }
        }
        for m in mean.iter_mut() {
            *m /= total;
        }
        let ll = top + total.ln();

        let al = par.alpha;
        let d_p = mean[1] * par.inv_s2 + al * (pr.ev - mean[7]);
        grad[0] += d_p;
        grad[1] += mean[2] * par.inv_s2 + al * (pr.ev * pr.tau_t - mean[8]);
        grad[2] += s.female * d_p;
        grad[3] += s.older * d_p;
        grad[IDX_LOG_L11] += mean[3];
        grad[IDX_L21] += mean[4];
        grad[IDX_LOG_L22] += mean[5];
        grad[IDX_LOG_SIGMA] += -pr.n + mean[6] * par.inv_s2;
        for j in 0..k {
            grad[IDX_LAMBDA + j] -= mean[12 + j];
        }
        if s.event {
            grad[IDX_LAMBDA + s.event_piece] += 1.0;
        }
        grad[IDX_LAMBDA + k] += s.female * (pr.ev - mean[7]);
        grad[IDX_LAMBDA + k + 1] += s.older * (pr.ev - mean[7]);
        let m_t = pr.p0 + mean[10] + (pr.s0 + mean[11]) * pr.tau_t;
        grad[IDX_LAMBDA + k + 2] += pr.ev * m_t - mean[9];
        ll
    }

    /// Per-subject log-likelihood contributions and scores, in subject order.
    fn contributions(&self, theta: &[f64]) -> Vec<(f64, Vec<f64>)> {
        assert!(!self.nodes.is_empty(), "recenter must run before evaluation");
        let dim = self.n_params();
        let par = Par::new(theta, self.data.n_pieces());
        let n = self.data.subjects.len();
        let one = |buf: &mut Vec<f64>, i: usize| {
            let mut g = vec![0.0; dim];
            let v = self.subject(&par, i, &mut g, buf);
            (v, g)
        };
        if self.parallel {
            (0..n).into_par_iter().map_init(Vec::new, one).collect()
        } else {
            let mut buf = Vec::new();
            (0..n).map(|i| one(&mut buf, i)).collect()
        }
    }

    /// Log-likelihood and its gradient at `theta` over the current nodes;
    /// `None` if anything is not finite.
    pub fn value_and_gradient(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.n_params()];
        let mut ll = 0.0;
        // summed in subject order whether or not the terms ran in parallel
        for (v, g) in self.contributions(theta) {
            ll += v;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (ll.is_finite() && grad.iter().all(|g| g.is_finite())).then_some((ll, grad))
    }

    /// Sum of the outer products of the per-subject scores, row-major.
    pub fn score_outer_product(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let dim = self.n_params();
        let mut opg = vec![0.0; dim * dim];
        for (_, g) in self.contributions(theta) {
            for i in 0..dim {
                for j in 0..dim {
                    opg[i * dim + j] += g[i] * g[j];
                }
            }
        }
        opg.iter().all(|v| v.is_finite()).then_some(opg)
    }
}

/// Log-likelihood at natural-scale parameters with quadrature centred at the
/// posterior modes under those parameters.
pub fn jm_loglik(params: &JointParams, data: &JmData, quadrature_order: usize) -> Result<f64> {
    let theta = theta_from_params(params, data.n_pieces(), data.center)?;
    let mut obj = JointObjective::new(data, quadrature_order, false);
    obj.recenter(&theta)?;
    obj.value_and_gradient(&theta)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Numerical("log-likelihood is not finite".into()))
}

/// Survival log-likelihood of the piecewise-exponential model without the
/// marker term (`alpha = 0`).
pub fn survival_loglik_no_association(params: &JointParams, data: &JmData) -> f64 {
    data.subjects
        .iter()
        .map(|s| {
            let eta = params.gamma_female * s.female + params.gamma_older * s.older;
            let exposure: f64 = s.segments.iter().map(|g| params.baseline[g.piece] * g.width).sum();
            let mut v = -eta.exp() * exposure;
            if s.event {
                v += params.baseline[s.event_piece].ln() + eta;
            }
            v
        })
        .sum()
}

/// Closed-form marginal log-likelihood of the linear mixed model part.
pub fn lmm_marginal_loglik(params: &JointParams, data: &JmData) -> f64 {
    let d = [params.var_a, params.cov_ab, params.var_b];
    data.subjects
        .iter()
        .map(|s| super::lmm::subject_marginal_loglik(&params.beta, &d, params.sigma2, s))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jm::quadrature::GaussLegendre;
    use crate::jm::{JmData, JointModelSpec};
    use crate::sim::{simulate_cohort, GenerationConfig, Hypothesis, MissingnessScenario};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_data(n: usize, seed: u64) -> JmData {
        let cfg = GenerationConfig::preset(MissingnessScenario::WeakNmar, Hypothesis::H1);
        let c = simulate_cohort(n, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().derive_omit();
        JmData::from_cohort(&c, &JointModelSpec::default(), false).unwrap()
    }

    fn truth(n_pieces: usize) -> JointParams {
        JointParams {
            beta: [2.04, -0.02, 0.02, -0.07],
            var_a: 0.0236,
            cov_ab: 0.0,
            var_b: 0.0003,
            sigma2: 0.006,
            baseline: vec![0.01 * (-1.4f64 * 2.0).exp(); n_pieces],
            gamma_female: -0.3,
            gamma_older: 0.69,
            alpha: 1.4,
        }
    }

    fn random_theta(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
        base.iter().map(|v| v + rng.random_range(-0.3..0.3) * v.abs().max(0.1)).collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = small_data(60, 11);
        let base = theta_from_params(&truth(data.n_pieces()), data.n_pieces(), data.center).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obj = JointObjective::new(&data, 5, false);
        for _ in 0..5 {
            let theta = random_theta(&mut rng, &base);
            obj.recenter(&theta).unwrap();
            let (_, g) = obj.value_and_gradient(&theta).unwrap();
            for j in 0..theta.len() {
                let h = 1e-5 * theta[j].abs().max(1.0);
                let mut up = theta.clone();
                up[j] += h;
                let mut dn = theta.clone();
                dn[j] -= h;
                let fd = (obj.value_and_gradient(&up).unwrap().0 - obj.value_and_gradient(&dn).unwrap().0) / (2.0 * h);
                let err = (g[j] - fd).abs() / fd.abs().max(1.0);
                assert!(err < 1e-4, "coordinate {j}: analytic {} vs fd {fd}", g[j]);
            }
        }
    }

    #[test]
    fn cumulative_hazard_matches_legendre() {
        let data = small_data(30, 3);
        let p = truth(data.n_pieces());
        let theta = theta_from_params(&p, data.n_pieces(), data.center).unwrap();
        let par = Par::new(&theta, data.n_pieces());
        let gl = GaussLegendre::new(7);
        for s in &data.subjects {
            let pr = prep(&par, s, data.center, data.lag);
            let (a, b) = (0.1, -0.03);
            let hz = cumulative_hazard(&par, &pr, s, a, b, None);
            // natural-scale hazard integrated per segment in calendar time
            let mut want = 0.0;
            for seg in &s.segments {
                let start = seg.tau0 + data.lag;
                want += gl.integrate(start, start + seg.width, |t| {
                    let m = p.beta[0] + p.beta[2] * s.female + p.beta[3] * s.older + a
                        + (p.beta[1] + b) * (t - data.lag);
                    p.baseline[seg.piece]
                        * (p.gamma_female * s.female + p.gamma_older * s.older + p.alpha * m).exp()
                });
            }
            assert!((hz.h - want).abs() < 1e-12 * want.max(1e-300), "{} vs {want}", hz.h);
        }
    }

    #[test]
    fn factorises_without_association() {
        let data = small_data(80, 7);
        let mut p = truth(data.n_pieces());
        p.alpha = 0.0;
        p.cov_ab = 0.001;
        p.baseline = (0..data.n_pieces()).map(|k| 0.01 + 0.002 * k as f64).collect();
        let joint = jm_loglik(&p, &data, 5).unwrap();
        let split = lmm_marginal_loglik(&p, &data) + survival_loglik_no_association(&p, &data);
        assert!((joint - split).abs() < 1e-8, "{joint} vs {split}");
    }

    #[test]
    fn quadrature_order_doubling_is_stable() {
        let data = small_data(100, 9);
        let p = truth(data.n_pieces());
        let q7 = jm_loglik(&p, &data, 7).unwrap();
        let q14 = jm_loglik(&p, &data, 14).unwrap();
        assert!((q7 - q14).abs() < 1e-6, "{q7} vs {q14}");
    }

    #[test]
    fn theta_round_trip() {
        let p = truth(6);
        let theta = theta_from_params(&p, 6, 2.0).unwrap();
        let back = params_from_theta(&theta, 6, 2.0);
        for ((n1, v1), (_, v2)) in p.named().iter().zip(back.named()) {
            assert!((v1 - v2).abs() < 1e-12 * v1.abs().max(1.0), "{n1}");
        }
    }

    #[test]
    fn invalid_parameters_are_domain_errors() {
        let data = small_data(20, 1);
        let mut p = truth(data.n_pieces());
        p.sigma2 = 0.0;
        assert!(matches!(jm_loglik(&p, &data, 3), Err(Error::Domain(_))));
        let mut p = truth(data.n_pieces());
        p.var_b = -1.0;
        assert!(matches!(jm_loglik(&p, &data, 3), Err(Error::Domain(_))));
    }
}
