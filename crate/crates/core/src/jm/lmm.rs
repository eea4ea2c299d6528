//! Maximum likelihood for the random intercept and slope model
//! `y_ij = x_ij' beta + a_i + b_i t_ij + e_ij`, `x_ij = (1, t_ij, female, older)`.
//!
//! Fixed effects are profiled out by generalised least squares; the four
//! variance coordinates `(L11, L21, L22, ln sigma)` with `D = L L'` are
//! optimised, so zero variances are interior points of the search space.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::optim::{minimize_with_restarts, BfgsOptions};
use super::JmData;
use super::JmSubject;
use crate::error::{Error, Result};
use crate::fcs::regression::select_columns;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub beta: [f64; 4],
    pub var_a: f64,
    pub cov_ab: f64,
    pub var_b: f64,
    pub sigma2: f64,
    pub loglik: f64,
    pub converged: bool,
    /// A variance component collapsed to zero.
    pub boundary: bool,
    /// Conditional means of `(a_i, b_i)` per subject.
    pub random_effects: Vec<[f64; 2]>,
}

/// Sufficient statistics of one subject with the response centred.
#[derive(Debug, Clone)]
struct Stats {
    n: f64,
    xtx: [[f64; 4]; 4],
    xtz: [[f64; 2]; 4],
    xty: [f64; 4],
    zty: [f64; 2],
    yty: f64,
    ztz: [f64; 3],
}

fn stats(s: &JmSubject, shift: f64) -> Stats {
    let mut st = Stats {
        n: s.times.len() as f64,
        xtx: [[0.0; 4]; 4],
        xtz: [[0.0; 2]; 4],
        xty: [0.0; 4],
        zty: [0.0; 2],
        yty: 0.0,
        ztz: [0.0; 3],
    };
    for (&t, &y) in s.times.iter().zip(&s.values) {
        let y = y - shift;
        let x = [1.0, t, s.female, s.older];
        let z = [1.0, t];
        for r in 0..4 {
            for c in 0..4 {
                st.xtx[r][c] += x[r] * x[c];
            }
            for c in 0..2 {
                st.xtz[r][c] += x[r] * z[c];
            }
            st.xty[r] += x[r] * y;
        }
        st.zty[0] += y;
        st.zty[1] += t * y;
        st.yty += y * y;
        st.ztz[0] += 1.0;
        st.ztz[1] += t;
        st.ztz[2] += t * t;
    }
    st
}

/// `K = (sigma^2 I + D Z'Z)^{-1} D` (symmetric) and `ln det(I + D Z'Z / sigma^2)`.
fn woodbury(d: &[f64; 3], sigma2: f64, ztz: &[f64; 3]) -> ([f64; 3], f64) {
    // A = sigma2 I + D Z'Z
    let a11 = sigma2 + d[0] * ztz[0] + d[1] * ztz[1];
    let a12 = d[0] * ztz[1] + d[1] * ztz[2];
    let a21 = d[1] * ztz[0] + d[2] * ztz[1];
    let a22 = sigma2 + d[1] * ztz[1] + d[2] * ztz[2];
    let det = a11 * a22 - a12 * a21;
    let (i11, i12, i21, i22) = (a22 / det, -a12 / det, -a21 / det, a11 / det);
    let k11 = i11 * d[0] + i12 * d[1];
    let k12 = i11 * d[1] + i12 * d[2];
    let k22 = i21 * d[1] + i22 * d[2];
    ([k11, k12, k22], (det / (sigma2 * sigma2)).ln())
}

/// Closed-form marginal log-likelihood of one subject.
pub(crate) fn subject_marginal_loglik(beta: &[f64; 4], d: &[f64; 3], sigma2: f64, s: &JmSubject) -> f64 {
    let n = s.times.len() as f64;
    if s.times.is_empty() {
        return 0.0;
    }
    let (mut rr, mut zr0, mut zr1) = (0.0, 0.0, 0.0);
    let mut ztz = [0.0; 3];
    for (&t, &y) in s.times.iter().zip(&s.values) {
        let r = y - beta[0] - beta[1] * t - beta[2] * s.female - beta[3] * s.older;
        rr += r * r;
        zr0 += r;
        zr1 += r * t;
        ztz[0] += 1.0;
        ztz[1] += t;
        ztz[2] += t * t;
    }
    let (k, logdet_small) = woodbury(d, sigma2, &ztz);
    let quad = (rr - (k[0] * zr0 * zr0 + 2.0 * k[1] * zr0 * zr1 + k[2] * zr1 * zr1)) / sigma2;
    -0.5 * (n * LN_2PI + n * sigma2.ln() + logdet_small + quad)
}

fn unpack(phi: &[f64]) -> ([f64; 3], f64) {
    let (l11, l21, l22) = (phi[0], phi[1], phi[2]);
    ([l11 * l11, l11 * l21, l21 * l21 + l22 * l22], (2.0 * phi[3]).exp())
}

/// Profile log-likelihood, its gradient in `phi` and the GLS coefficients
/// (centred intercept). With `beta` profiled out only the direct dependence
/// on the variance parameters enters the gradient.
fn profile(phi: &[f64], all: &[Stats], n_total: f64) -> Option<(f64, [f64; 4], [f64; 4])> {
    let (d, sigma2) = unpack(phi);
    let mut xvx = [[0.0; 4]; 4];
    let mut xvy = [0.0; 4];
    let mut yvy = 0.0;
    let mut logdet = 0.0;
    let mut ks = Vec::with_capacity(all.len());
    for st in all {
        let (k, ld) = woodbury(&d, sigma2, &st.ztz);
        let kz = |v: [f64; 2]| [k[0] * v[0] + k[1] * v[1], k[1] * v[0] + k[2] * v[1]];
        for r in 0..4 {
            let kxr = kz(st.xtz[r]);
            for c in 0..4 {
                xvx[r][c] += (st.xtx[r][c] - (st.xtz[c][0] * kxr[0] + st.xtz[c][1] * kxr[1])) / sigma2;
            }
            xvy[r] += (st.xty[r] - (st.zty[0] * kxr[0] + st.zty[1] * kxr[1])) / sigma2;
        }
        let kzy = kz(st.zty);
        yvy += (st.yty - (st.zty[0] * kzy[0] + st.zty[1] * kzy[1])) / sigma2;
        logdet += st.n * sigma2.ln() + ld;
        ks.push(k);
    }
    let m = DMatrix::from_fn(4, 4, |r, c| xvx[r][c]);
    let (kept, _) = select_columns(&m);
    let mk = m.select_rows(&kept).select_columns(&kept);
    let rhs = DVector::from_iterator(kept.len(), kept.iter().map(|&c| xvy[c]));
    let sol = mk.cholesky()?.solve(&rhs);
    let mut beta = [0.0; 4];
    for (&c, v) in kept.iter().zip(sol.iter()) {
        beta[c] = *v;
    }
    let quad = yvy - beta.iter().zip(&xvy).map(|(b, v)| b * v).sum::<f64>();
    let ll = -0.5 * (n_total * LN_2PI + logdet + quad);

    // dl = tr(M dD) + s dsigma2 with
    // M = -1/2 Σ (Z'V^-1 Z - w w'), w = Z'V^-1 r, s = -1/2 Σ (tr V^-1 - |V^-1 r|^2)
    let mut mm = [0.0; 3];
    let mut ds2 = 0.0;
    for (st, k) in all.iter().zip(&ks) {
        let mut rtr = st.yty;
        let mut ztr = st.zty;
        for r in 0..4 {
            rtr -= 2.0 * beta[r] * st.xty[r];
            for c in 0..4 {
                rtr += beta[r] * beta[c] * st.xtx[r][c];
            }
            ztr[0] -= st.xtz[r][0] * beta[r];
            ztr[1] -= st.xtz[r][1] * beta[r];
        }
        let z = &st.ztz;
        let kv = |v: [f64; 2]| [k[0] * v[0] + k[1] * v[1], k[1] * v[0] + k[2] * v[1]];
        let zv = |v: [f64; 2]| [z[0] * v[0] + z[1] * v[1], z[1] * v[0] + z[2] * v[1]];
        let kztr = kv(ztr);
        let zkztr = zv(kztr);
        let w = [(ztr[0] - zkztr[0]) / sigma2, (ztr[1] - zkztr[1]) / sigma2];
        // Z'Z K Z'Z
        let kz1 = kv([z[0], z[1]]);
        let kz2 = kv([z[1], z[2]]);
        let zkz1 = zv(kz1);
        let zkz2 = zv(kz2);
        let zvz = [(z[0] - zkz1[0]) / sigma2, (z[1] - zkz1[1]) / sigma2, (z[2] - zkz2[1]) / sigma2];
        mm[0] += -0.5 * (zvz[0] - w[0] * w[0]);
        mm[1] += -0.5 * (zvz[1] - w[0] * w[1]);
        mm[2] += -0.5 * (zvz[2] - w[1] * w[1]);
        let tr_kz = k[0] * z[0] + 2.0 * k[1] * z[1] + k[2] * z[2];
        let tr_vinv = (st.n - tr_kz) / sigma2;
        let kzkz = kztr[0] * zkztr[0] + kztr[1] * zkztr[1];
        let vr2 = (rtr - 2.0 * (ztr[0] * kztr[0] + ztr[1] * kztr[1]) + kzkz) / (sigma2 * sigma2);
        ds2 += -0.5 * (tr_vinv - vr2);
    }
    let (l11, l21, l22) = (phi[0], phi[1], phi[2]);
    let grad = [
        2.0 * l11 * mm[0] + 2.0 * mm[1] * l21,
        2.0 * mm[1] * l11 + 2.0 * mm[2] * l21,
        2.0 * mm[2] * l22,
        2.0 * sigma2 * ds2,
    ];
    (ll.is_finite() && grad.iter().all(|g| g.is_finite())).then_some((ll, beta, grad))
}

/// ML fit of the linear mixed model to the longitudinal part of `data`.
pub fn fit_lmm(data: &JmData) -> Result<LmmFit> {
    let n_total = data.n_observations();
    if n_total < 5 {
        return Err(Error::Numerical(format!("{n_total} observations cannot identify the mixed model")));
    }
    let shift = data.subjects.iter().flat_map(|s| s.values.iter()).sum::<f64>() / n_total as f64;
    let all: Vec<Stats> = data.subjects.iter().filter(|s| !s.times.is_empty()).map(|s| stats(s, shift)).collect();
    if !all.iter().any(|s| s.n >= 2.0) {
        warn!("no subject has repeated measurements; variance components are not identified");
    }

    // ordinary least squares for starting values
    let mut xtx = [[0.0; 4]; 4];
    let mut xty = [0.0; 4];
    let mut yty = 0.0;
    let mut t2 = 0.0;
    for st in &all {
        for r in 0..4 {
            for c in 0..4 {
                xtx[r][c] += st.xtx[r][c];
            }
            xty[r] += st.xty[r];
        }
        yty += st.yty;
        t2 += st.ztz[2];
    }
    let m = DMatrix::from_fn(4, 4, |r, c| xtx[r][c]);
    let (kept, _) = select_columns(&m);
    let mk = m.select_rows(&kept).select_columns(&kept);
    let rhs = DVector::from_iterator(kept.len(), kept.iter().map(|&c| xty[c]));
    let ols = mk
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular fixed-effects design".into()))?
        .solve(&rhs);
    let fitted: f64 = kept.iter().zip(ols.iter()).map(|(&c, b)| b * xty[c]).sum();
    let s2 = ((yty - fitted) / n_total as f64).max(1e-12);
    let mean_t2 = (t2 / n_total as f64).max(1.0);
    let phi0 = [(0.5 * s2).sqrt(), 0.0, (0.05 * s2 / mean_t2).sqrt(), (0.5 * s2).sqrt().ln()];

    let nt = n_total as f64;
    let objective = |phi: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (f, _, g) = profile(phi, &all, nt)?;
        Some((-f, g.iter().map(|v| -v).collect()))
    };
    let opts = BfgsOptions {
        max_iterations: 500,
        rel_tol: 1e-10,
        grad_tol: 1e-5,
    };
    let res = minimize_with_restarts(objective, &phi0, &opts, 3)
        .ok_or_else(|| Error::Numerical("mixed model likelihood undefined at the start".into()))?;
    let (ll, beta_c, _) = profile(&res.x, &all, nt).ok_or_else(|| Error::Numerical("mixed model fit failed".into()))?;
    let (d, sigma2) = unpack(&res.x);
    let mut beta = beta_c;
    beta[0] += shift;

    let boundary = res.x[0].powi(2) < 1e-6 * sigma2 || res.x[2].powi(2) < 1e-6 * sigma2;
    if boundary {
        warn!(
            "random-effects variance at the boundary (var_a = {:.3e}, var_b = {:.3e})",
            d[0], d[2]
        );
    }
    if !res.converged {
        warn!("mixed model optimisation stopped after {} iterations", res.iterations);
    }

    let random_effects = data
        .subjects
        .iter()
        .map(|s| {
            if s.times.is_empty() {
                return [0.0, 0.0];
            }
            let (mut zr0, mut zr1) = (0.0, 0.0);
            let mut ztz = [0.0; 3];
            for (&t, &y) in s.times.iter().zip(&s.values) {
                let r = y - beta[0] - beta[1] * t - beta[2] * s.female - beta[3] * s.older;
                zr0 += r;
                zr1 += r * t;
                ztz[0] += 1.0;
                ztz[1] += t;
                ztz[2] += t * t;
            }
            let (k, _) = woodbury(&d, sigma2, &ztz);
            [k[0] * zr0 + k[1] * zr1, k[1] * zr0 + k[2] * zr1]
        })
        .collect();

    Ok(LmmFit {
        beta,
        var_a: d[0],
        cov_ab: d[1],
        var_b: d[2],
        sigma2,
        loglik: ll,
        converged: res.converged,
        boundary,
        random_effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jm::{JointModelSpec, SubjectInput};
    use crate::sim::{simulate_cohort, GenerationConfig, Hypothesis, MissingnessScenario};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn inputs_to_data(inputs: Vec<SubjectInput>) -> JmData {
        JmData::new(inputs, vec![0.0], 1.0, 0.0).unwrap()
    }

    #[test]
    fn recovers_generating_fixed_effects() {
        let cfg = GenerationConfig::preset(MissingnessScenario::Cmar, Hypothesis::H0);
        let c = simulate_cohort(3000, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap().derive_omit();
        let full = c.fully_observed().unwrap();
        let data = JmData::from_cohort(&full, &JointModelSpec::default(), false).unwrap();
        let fit = fit_lmm(&data).unwrap();
        assert!(fit.converged);
        // Monte Carlo SE of the intercept is about sqrt(0.0236 / 3000) = 0.003
        assert!((fit.beta[0] - 2.04).abs() < 0.015, "intercept {}", fit.beta[0]);
        assert!((fit.beta[1] + 0.02).abs() < 0.003, "slope {}", fit.beta[1]);
        assert!((fit.var_a - 0.0236).abs() < 0.004, "var_a {}", fit.var_a);
        assert!((fit.sigma2 - 0.006).abs() < 0.0005, "sigma2 {}", fit.sigma2);
    }

    #[test]
    fn centred_balanced_design_gives_grand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let inputs: Vec<SubjectInput> = (0..40)
            .map(|i| {
                let a = noise.sample(&mut rng);
                SubjectInput {
                    id: i,
                    female: false,
                    older: false,
                    times: vec![-1.0, 0.0, 1.0],
                    values: (0..3).map(|_| 5.0 + a + noise.sample(&mut rng)).collect(),
                    event: i == 0,
                    time: 2.0,
                }
            })
            .collect();
        let grand = inputs.iter().flat_map(|s| s.values.iter()).sum::<f64>() / 120.0;
        let fit = fit_lmm(&inputs_to_data(inputs)).unwrap();
        assert!((fit.beta[0] - grand).abs() < 1e-9, "{} vs {grand}", fit.beta[0]);
        assert_eq!(fit.beta[2], 0.0);
        assert_eq!(fit.beta[3], 0.0);
    }

    #[test]
    fn no_between_subject_variation_collapses_variances() {
        // every subject has the same deviations from a common line, and these
        // are orthogonal to (1, t)
        let times = [0.5, 1.5, 2.5, 3.5];
        let pattern = [0.1, -0.1, -0.1, 0.1];
        let inputs: Vec<SubjectInput> = (0..200)
            .map(|i| SubjectInput {
                id: i,
                female: i % 2 == 0,
                older: i % 3 == 0,
                times: times.to_vec(),
                values: times.iter().zip(pattern).map(|(t, e)| 1.0 + 0.2 * t + e).collect(),
                event: i == 0,
                time: 4.0,
            })
            .collect();
        let fit = fit_lmm(&inputs_to_data(inputs)).unwrap();
        assert!(fit.var_a < 1e-4 * fit.sigma2, "var_a {}", fit.var_a);
        assert!(fit.var_b < 1e-4 * fit.sigma2, "var_b {}", fit.var_b);
        assert!(fit.boundary);
        assert!((fit.sigma2 - 0.01).abs() < 1e-6, "sigma2 {}", fit.sigma2);
        assert!((fit.beta[1] - 0.2).abs() < 1e-8);
    }

    #[test]
    fn profile_gradient_matches_central_differences() {
        let cfg = GenerationConfig::preset(MissingnessScenario::Cmar, Hypothesis::H1);
        let c = simulate_cohort(150, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap().derive_omit();
        let data = JmData::from_cohort(&c, &JointModelSpec::default(), false).unwrap();
        let all: Vec<Stats> = data.subjects.iter().map(|s| stats(s, 2.0)).collect();
        let nt = data.n_observations() as f64;
        for phi in [[0.15, 0.01, 0.02, -2.5], [0.3, -0.05, 0.1, -1.0], [-0.1, 0.0, 0.05, -2.0]] {
            let (_, _, g) = profile(&phi, &all, nt).unwrap();
            for j in 0..4 {
                let h = 1e-6;
                let mut up = phi;
                up[j] += h;
                let mut dn = phi;
                dn[j] -= h;
                let fd = (profile(&up, &all, nt).unwrap().0 - profile(&dn, &all, nt).unwrap().0) / (2.0 * h);
                assert!((g[j] - fd).abs() < 1e-4 * fd.abs().max(1.0), "{j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn marginal_loglik_matches_dense_gaussian() {
        let s = &inputs_to_data(vec![SubjectInput {
            id: 1,
            female: true,
            older: false,
            times: vec![0.5, 1.5, 3.5],
            values: vec![2.0, 2.3, 1.7],
            event: true,
            time: 4.0,
        }])
        .subjects[0];
        let beta = [2.0, -0.05, 0.1, 0.0];
        let d = [0.2, 0.01, 0.03];
        let sigma2 = 0.05;
        let t = &s.times;
        let v = DMatrix::from_fn(3, 3, |i, j| {
            d[0] + d[1] * (t[i] + t[j]) + d[2] * t[i] * t[j] + if i == j { sigma2 } else { 0.0 }
        });
        let r = DVector::from_iterator(3, (0..3).map(|i| s.values[i] - beta[0] - beta[1] * t[i] - beta[2]));
        let chol = v.clone().cholesky().unwrap();
        let quad = r.dot(&chol.solve(&r));
        let want = -0.5 * (3.0 * LN_2PI + v.determinant().ln() + quad);
        let got = subject_marginal_loglik(&beta, &d, sigma2, s);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
