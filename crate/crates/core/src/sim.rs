//! Synthetic cohorts: a random intercept/slope marker model, a discrete-time
//! logistic hazard on the lag-1 latent marker, and shared-parameter
//! missingness driven by the subject's random effects.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, LatentState, PeriodGrid, SubjectRecord};
use crate::error::{Error, Result};

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-marker mixed model: `m_i(j) = alpha + a_i + (beta_time + b_i) j
/// + beta_female female + beta_older older`, observed with error `eps_i(j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerModelParams {
    pub alpha: f64,
    pub beta_time: f64,
    pub beta_female: f64,
    pub beta_older: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub var_eps: f64,
}

impl Default for MarkerModelParams {
    fn default() -> Self {
        Self {
            alpha: 2.04,
            beta_time: -0.02,
            beta_female: 0.02,
            beta_older: -0.07,
            var_a: 0.0236,
            var_b: 0.0003,
            var_eps: 0.006,
        }
    }
}

impl MarkerModelParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("var_a", self.var_a), ("var_b", self.var_b), ("var_eps", self.var_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative finite variance, got {v}")));
            }
        }
        Ok(())
    }

    /// Latent log-marker of period `j` for given random effects and covariates.
    pub fn latent(&self, a: f64, b: f64, j: f64, female: bool, older: bool) -> f64 {
        self.alpha
            + a
            + (self.beta_time + b) * j
            + self.beta_female * f64::from(u8::from(female))
            + self.beta_older * f64::from(u8::from(older))
    }
}

/// Per-period logistic hazard on the latent lag-1 marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalModelParams {
    pub intercept: f64,
    pub coef_older: f64,
    pub coef_female: f64,
    pub assoc_alpha: f64,
}

impl SurvivalModelParams {
    pub fn h1() -> Self {
        Self {
            intercept: -5.0,
            coef_older: 0.69,
            coef_female: -0.3,
            assoc_alpha: 1.4,
        }
    }

    pub fn h0() -> Self {
        Self {
            assoc_alpha: 0.0,
            ..Self::h1()
        }
    }

    pub fn for_hypothesis(h: Hypothesis) -> Self {
        match h {
            Hypothesis::H1 => Self::h1(),
            Hypothesis::H0 => Self::h0(),
        }
    }

    pub fn period_probability(&self, female: bool, older: bool, lagged_marker: f64) -> f64 {
        logistic(
            self.intercept
                + self.coef_older * f64::from(u8::from(older))
                + self.coef_female * f64::from(u8::from(female))
                + self.assoc_alpha * lagged_marker,
        )
    }
}

/// `logit P(missing) = intercept + gamma1 a_i + gamma2 b_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessParams {
    pub intercept: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl MissingnessParams {
    pub fn for_scenario(s: MissingnessScenario) -> Self {
        let (gamma1, gamma2) = match s {
            MissingnessScenario::Cmar => (0.0, 0.0),
            MissingnessScenario::WeakNmar => (2.0, 5.0),
            MissingnessScenario::StrongNmar => (20.0, 25.0),
        };
        Self {
            intercept: -0.405,
            gamma1,
            gamma2,
        }
    }

    pub fn probability(&self, a: f64, b: f64) -> f64 {
        logistic(self.intercept + self.gamma1 * a + self.gamma2 * b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessScenario {
    Cmar,
    WeakNmar,
    StrongNmar,
}

impl MissingnessScenario {
    pub const ALL: [MissingnessScenario; 3] = [Self::Cmar, Self::WeakNmar, Self::StrongNmar];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cmar => "cmar",
            Self::WeakNmar => "weak_nmar",
            Self::StrongNmar => "strong_nmar",
        }
    }
}

impl fmt::Display for MissingnessScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MissingnessScenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmar" => Ok(Self::Cmar),
            "weak_nmar" | "weak" => Ok(Self::WeakNmar),
            "strong_nmar" | "strong" => Ok(Self::StrongNmar),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    H1,
    H0,
}

impl Hypothesis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::H1 => "h1",
            Self::H0 => "h0",
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Hypothesis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h1" => Ok(Self::H1),
            "h0" => Ok(Self::H0),
            other => Err(Error::Config(format!("unknown hypothesis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateProbs {
    pub p_older: f64,
    pub p_female: f64,
}

impl Default for CovariateProbs {
    fn default() -> Self {
        Self {
            p_older: 0.47,
            p_female: 0.5,
        }
    }
}

/// Everything needed to generate one synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_periods: usize,
    pub covariates: CovariateProbs,
    pub marker: MarkerModelParams,
    pub survival: SurvivalModelParams,
    pub missingness: MissingnessParams,
}

impl GenerationConfig {
    pub fn preset(scenario: MissingnessScenario, hypothesis: Hypothesis) -> Self {
        Self {
            n_periods: 7,
            covariates: CovariateProbs::default(),
            marker: MarkerModelParams::default(),
            survival: SurvivalModelParams::for_hypothesis(hypothesis),
            missingness: MissingnessParams::for_scenario(scenario),
        }
    }
}

/// Draws covariates, random effects and error-laden markers for `n` subjects.
/// Every subject starts censored at the end of the grid without an event.
pub fn simulate_markers<R: Rng + ?Sized>(
    n: usize,
    params: &MarkerModelParams,
    grid: PeriodGrid,
    probs: CovariateProbs,
    rng: &mut R,
) -> Result<CohortDataset> {
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    params.validate()?;
    let normal = |var: f64| Normal::new(0.0, var.sqrt()).map_err(|e| Error::Config(e.to_string()));
    let dist_a = normal(params.var_a)?;
    let dist_b = normal(params.var_b)?;
    let dist_eps = normal(params.var_eps)?;
    let n_periods = grid.n_periods();

    let subjects = (0..n)
        .map(|i| {
            let older = rng.random::<f64>() < probs.p_older;
            let female = rng.random::<f64>() < probs.p_female;
            let a = dist_a.sample(rng);
            let b = dist_b.sample(rng);
            let log_marker: Vec<f64> = (1..=n_periods)
                .map(|j| params.latent(a, b, j as f64, female, older))
                .collect();
            let full_marker: Vec<f64> = log_marker
                .iter()
                .map(|&m| (m + dist_eps.sample(rng)).exp())
                .collect();
            SubjectRecord {
                id: i as u64 + 1,
                female,
                older,
                marker: full_marker.iter().map(|&v| Some(v)).collect(),
                event: false,
                time: n_periods as f64,
                omit: false,
                latent: Some(LatentState {
                    a,
                    b,
                    log_marker,
                    full_marker,
                }),
            }
        })
        .collect();
    CohortDataset::new(grid, subjects, "simulated")
}

/// Event time within a period: `E` exponential with rate `-ln(1 - p)`
/// truncated to `(0, 1]`, so that the subject still fails inside the period.
fn within_period_offset<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>(); // (0, 1]
    let rate = -(-p).ln_1p();
    if rate < 1e-12 {
        return u;
    }
    let offset = -(-u * (-(-rate).exp_m1())).ln_1p() / rate;
    offset.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Discrete-time logistic events from period 2 onwards, using the latent
/// marker of the previous period, mapped to continuous time.
pub fn simulate_events<R: Rng + ?Sized>(
    cohort: &CohortDataset,
    params: &SurvivalModelParams,
    rng: &mut R,
) -> Result<CohortDataset> {
    let n_periods = cohort.grid.n_periods();
    let mut out = cohort.clone();
    for s in &mut out.subjects {
        let latent = s
            .latent
            .as_ref()
            .ok_or_else(|| Error::InvalidCohort(format!("subject {} has no latent trajectory", s.id)))?;
        s.event = false;
        s.time = n_periods as f64;
        for j in 2..=n_periods {
            let p = params.period_probability(s.female, s.older, latent.log_marker[j - 2]);
            if rng.random::<f64>() < p {
                s.event = true;
                s.time = (j - 1) as f64 + within_period_offset(p, rng);
                break;
            }
        }
    }
    Ok(out)
}

/// Masks every marker cell independently with the shared-parameter
/// probability. Post-event cells are masked like any other.
pub fn apply_missingness<R: Rng + ?Sized>(
    cohort: &CohortDataset,
    params: &MissingnessParams,
    rng: &mut R,
) -> Result<CohortDataset> {
    let mut out = cohort.clone();
    for s in &mut out.subjects {
        let latent = s
            .latent
            .as_ref()
            .ok_or_else(|| Error::InvalidCohort(format!("subject {} has no random effects", s.id)))?;
        let p = params.probability(latent.a, latent.b);
        for (cell, &full) in s.marker.iter_mut().zip(&latent.full_marker) {
            *cell = if rng.random::<f64>() < p { None } else { Some(full) };
        }
    }
    Ok(out)
}

/// Markers, then events, then missingness, in that order on one stream.
pub fn simulate_cohort<R: Rng + ?Sized>(
    n: usize,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<CohortDataset> {
    let grid = PeriodGrid::new(config.n_periods)?;
    let markers = simulate_markers(n, &config.marker, grid, config.covariates, rng)?;
    let events = simulate_events(&markers, &config.survival, rng)?;
    let mut masked = apply_missingness(&events, &config.missingness, rng)?;
    masked.scenario_tag = "simulated".into();
    Ok(masked)
}
