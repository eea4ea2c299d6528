//! Rubin's rules for a scalar parameter and Monte Carlo study metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Degrees of freedom above which t quantiles are taken from the normal.
const NORMAL_DF: f64 = 1e7;

/// Two-sided quantile `q` such that `P(|T_df| <= q) = level`.
/// Infinite or very large `df` falls back to the standard normal.
pub fn two_sided_quantile(level: f64, df: Option<f64>) -> f64 {
    let p = 0.5 * (1.0 + level);
    match df {
        Some(df) if df.is_finite() && df < NORMAL_DF => StudentsT::new(0.0, 1.0, df)
            .expect("positive df")
            .inverse_cdf(p),
        _ => Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub m: usize,
    /// Pooled point estimate.
    pub q_bar: f64,
    /// Mean within-imputation variance.
    pub u_bar: f64,
    /// Between-imputation variance.
    pub b: f64,
    /// Total variance `u_bar + (1 + 1/m) b`.
    pub t: f64,
    /// Barnard-Rubin degrees of freedom.
    pub df: f64,
    /// Fraction of variance due to missingness, `(1 + 1/m) b / t`.
    pub lambda: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PooledEstimate {
    pub fn se(&self) -> f64 {
        self.t.sqrt()
    }
}

/// Combines `m >= 2` estimates and their squared standard errors.
///
/// `complete_df` is the complete-data degrees of freedom entering the
/// Barnard-Rubin adjustment; `f64::INFINITY` gives the large-sample
/// `(m - 1) / lambda^2`.
pub fn rubin_pool(
    estimates: &[f64],
    variances: &[f64],
    confidence: f64,
    complete_df: f64,
) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::TooFewMultiples(m));
    }
    if variances.len() != m {
        return Err(Error::Config(format!(
            "{m} estimates but {} variances",
            variances.len()
        )));
    }
    if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("within-imputation variances must be nonnegative".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence level {confidence} outside (0, 1)")));
    }
    if !(complete_df > 0.0) {
        return Err(Error::Config("complete-data df must be positive".into()));
    }
    let mf = m as f64;
    let q_bar = estimates.iter().sum::<f64>() / mf;
    let u_bar = variances.iter().sum::<f64>() / mf;
    let b = estimates.iter().map(|q| (q - q_bar).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated_b = (1.0 + 1.0 / mf) * b;
    let t = u_bar + inflated_b;
    let lambda = if t > 0.0 { inflated_b / t } else { 0.0 };

    let df_m = if lambda > 0.0 {
        (mf - 1.0) / (lambda * lambda)
    } else {
        f64::INFINITY
    };
    let df_obs = if complete_df.is_finite() {
        (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lambda)
    } else {
        f64::INFINITY
    };
    let df = match (df_m.is_finite(), df_obs.is_finite()) {
        (true, true) => {
            if df_obs <= 0.0 {
                // lambda == 1: no observed-data information
                df_m
            } else {
                df_m * df_obs / (df_m + df_obs)
            }
        }
        (true, false) => df_m,
        (false, true) => df_obs.max(f64::MIN_POSITIVE),
        (false, false) => f64::INFINITY,
    };
    let half = two_sided_quantile(confidence, Some(df)) * t.sqrt();
    Ok(PooledEstimate {
        m,
        q_bar,
        u_bar,
        b,
        t,
        df,
        lambda,
        ci_low: q_bar - half,
        ci_high: q_bar + half,
    })
}

/// One replication's estimate of the target parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEstimate {
    pub estimate: f64,
    pub se: f64,
    /// Reference t degrees of freedom; `None` means a normal reference.
    pub df: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ReplicationEstimate {
    /// Wald-type estimate with a symmetric interval at `confidence`.
    pub fn wald(estimate: f64, se: f64, df: Option<f64>, confidence: f64) -> Self {
        let half = two_sided_quantile(confidence, df) * se;
        Self {
            estimate,
            se,
            df,
            ci_low: estimate - half,
            ci_high: estimate + half,
        }
    }

    pub fn from_pooled(p: &PooledEstimate) -> Self {
        Self {
            estimate: p.q_bar,
            se: p.se(),
            df: Some(p.df),
            ci_low: p.ci_low,
            ci_high: p.ci_high,
        }
    }

    /// Two-sided 5% test of a zero parameter using `estimate / se`.
    pub fn rejects_zero(&self) -> bool {
        if self.se <= 0.0 {
            return self.estimate != 0.0;
        }
        (self.estimate / self.se).abs() >= two_sided_quantile(0.95, self.df)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub n: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    /// Monte Carlo 95% interval for the mean estimate.
    pub mean_ci: (f64, f64),
    pub empirical_variance: f64,
    pub bias: f64,
    /// `None` when the truth is zero.
    pub percent_bias: Option<f64>,
    pub rmse: f64,
    pub coverage: f64,
    /// Fraction of replications rejecting a zero parameter at two-sided 5%.
    pub type1_rate: f64,
    /// 95% Wilson interval of `type1_rate`.
    pub type1_ci: (f64, f64),
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = two_sided_quantile(confidence, None);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn compute_metrics(records: &[ReplicationEstimate], truth: f64) -> Result<StudyMetrics> {
    if records.is_empty() {
        return Err(Error::Empty("no replication estimates to summarise"));
    }
    let n = records.len();
    let nf = n as f64;
    let mean = records.iter().map(|r| r.estimate).sum::<f64>() / nf;
    let empirical_variance = if n > 1 {
        records.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    let mc_half = 1.96 * (empirical_variance / nf).sqrt();
    let bias = mean - truth;
    let percent_bias = (truth != 0.0).then(|| 100.0 * bias / truth);
    let rmse = (records.iter().map(|r| (r.estimate - truth).powi(2)).sum::<f64>() / nf).sqrt();
    let covered = records
        .iter()
        .filter(|r| r.ci_low <= truth && truth <= r.ci_high)
        .count();
    let rejections = records.iter().filter(|r| r.rejects_zero()).count();
    Ok(StudyMetrics {
        n,
        truth,
        mean_estimate: mean,
        mean_ci: (mean - mc_half, mean + mc_half),
        empirical_variance,
        bias,
        percent_bias,
        rmse,
        coverage: covered as f64 / nf,
        type1_rate: rejections as f64 / nf,
        type1_ci: wilson_interval(rejections, n, 0.95),
    })
}
