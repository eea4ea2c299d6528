//! Shared-parameter joint model of a log-marker trajectory and a lagged
//! proportional hazard.
//!
//! Longitudinal part: `y_ij = m_i(t_ij) + e_ij` with
//! `m_i(t) = b0 + b1 t + b2 female + b3 older + a_i + b_i t`,
//! `(a_i, b_i) ~ N(0, D)`, `e_ij ~ N(0, sigma^2)`.
//!
//! Hazard: `h_i(t) = lambda_k exp(g_f female + g_o older + alpha m_i(t - lag))`
//! for `t` in baseline piece `k`. Subjects enter the risk set at
//! `risk_entry`; the pieces are unit intervals from there and the last one is
//! open-ended.

mod fit;
mod likelihood;
mod lmm;
pub mod optim;
pub mod quadrature;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::error::{Error, Result};

pub use fit::{fit_jm, fit_jm_data, JointFit};
pub use likelihood::{jm_loglik, lmm_marginal_loglik, survival_loglik_no_association, JointObjective};
pub use lmm::{fit_lmm, LmmFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointModelSpec {
    /// Lag (in periods) between the marker value and the hazard it drives.
    pub lag: usize,
    /// Gauss-Hermite nodes per random-effect dimension.
    pub quadrature_order: usize,
    /// Start of the risk set.
    pub risk_entry: f64,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    /// Maximum number of quadrature re-centerings.
    pub max_outer: usize,
    pub confidence: f64,
    /// Evaluate per-subject contributions on the rayon pool.
    pub parallel: bool,
}

impl Default for JointModelSpec {
    fn default() -> Self {
        Self {
            lag: 1,
            quadrature_order: 9,
            risk_entry: 1.0,
            max_iterations: 500,
            rel_tol: 1e-8,
            grad_tol: 1e-5,
            max_outer: 8,
            confidence: 0.95,
            parallel: false,
        }
    }
}

impl JointModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.quadrature_order == 0 {
            return Err(Error::Config("quadrature order must be at least 1".into()));
        }
        if !(self.risk_entry >= 0.0) {
            return Err(Error::Config("risk entry must be non-negative".into()));
        }
        if self.max_iterations == 0 || self.max_outer == 0 {
            return Err(Error::Config("iteration limits must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Joint model parameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    /// Intercept, time, female, older.
    pub beta: [f64; 4],
    pub var_a: f64,
    pub cov_ab: f64,
    pub var_b: f64,
    pub sigma2: f64,
    /// Baseline hazard per piece.
    pub baseline: Vec<f64>,
    pub gamma_female: f64,
    pub gamma_older: f64,
    pub alpha: f64,
}

impl JointParams {
    /// Flat `(name, value)` listing in a fixed order.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("beta_intercept".to_string(), self.beta[0]),
            ("beta_time".to_string(), self.beta[1]),
            ("beta_female".to_string(), self.beta[2]),
            ("beta_older".to_string(), self.beta[3]),
            ("var_a".to_string(), self.var_a),
            ("cov_ab".to_string(), self.cov_ab),
            ("var_b".to_string(), self.var_b),
            ("sigma2".to_string(), self.sigma2),
        ];
        for (k, l) in self.baseline.iter().enumerate() {
            out.push((format!("baseline_{}", k + 1), *l));
        }
        out.push(("gamma_female".to_string(), self.gamma_female));
        out.push(("gamma_older".to_string(), self.gamma_older));
        out.push(("alpha".to_string(), self.alpha));
        out
    }

    /// Cholesky factor `(L11, L21, L22)` of `D`; errors unless `D` is
    /// positive definite.
    pub fn cholesky(&self) -> Result<(f64, f64, f64)> {
        if !(self.var_a > 0.0) {
            return Err(Error::Domain(format!("var_a = {} is not positive", self.var_a)));
        }
        let l11 = self.var_a.sqrt();
        let l21 = self.cov_ab / l11;
        let rest = self.var_b - l21 * l21;
        if !(rest > 0.0) {
            return Err(Error::Domain("random-effects covariance is not positive definite".into()));
        }
        Ok((l11, l21, rest.sqrt()))
    }
}

/// One baseline piece overlapping a subject's time at risk, in lagged time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Segment {
    pub piece: usize,
    /// Lagged start `start - lag`.
    pub tau0: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JmSubject {
    pub id: u64,
    pub female: f64,
    pub older: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub event: bool,
    pub time: f64,
    pub(crate) sum_t: f64,
    pub(crate) sum_tt: f64,
    pub(crate) event_piece: usize,
    pub(crate) segments: Vec<Segment>,
}

impl JmSubject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

/// Longitudinal and survival data prepared for likelihood evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct JmData {
    pub subjects: Vec<JmSubject>,
    /// Lower boundary of each baseline piece; the last piece is open.
    pub breaks: Vec<f64>,
    pub lag: f64,
    pub risk_entry: f64,
    /// Constant subtracted from the marker inside the hazard; only affects
    /// the baseline parametrisation.
    pub center: f64,
    pub n_events: usize,
}

/// Raw per-subject input for [`JmData::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInput {
    pub id: u64,
    pub female: bool,
    pub older: bool,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub event: bool,
    pub time: f64,
}

fn piece_of(breaks: &[f64], t: f64) -> usize {
    breaks.iter().rposition(|&b| b < t).unwrap_or(0)
}

impl JmData {
    /// Builds the data with the given piece boundaries. Pieces without
    /// events are merged into a neighbour.
    pub fn new(inputs: Vec<SubjectInput>, breaks: Vec<f64>, lag: f64, risk_entry: f64) -> Result<Self> {
        if breaks.is_empty() || breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("baseline breaks must be strictly increasing".into()));
        }
        for s in &inputs {
            if s.times.len() != s.values.len() {
                return Err(Error::InvalidCohort(format!("subject {}: times and values differ in length", s.id)));
            }
            if !(s.time > risk_entry) {
                return Err(Error::InvalidCohort(format!(
                    "subject {} leaves follow-up at {} before entering the risk set at {risk_entry}",
                    s.id, s.time
                )));
            }
        }
        let n_events = inputs.iter().filter(|s| s.event).count();
        if n_events == 0 {
            return Err(Error::NoEvents);
        }
        let mut breaks = breaks;
        loop {
            let mut counts = vec![0usize; breaks.len()];
            for s in inputs.iter().filter(|s| s.event) {
                counts[piece_of(&breaks, s.time)] += 1;
            }
            match counts.iter().position(|&c| c == 0) {
                Some(_) if breaks.len() == 1 => break,
                Some(0) => {
                    breaks.remove(1);
                }
                Some(k) => {
                    breaks.remove(k);
                }
                None => break,
            }
        }

        let n_obs: usize = inputs.iter().map(|s| s.values.len()).sum();
        let center = if n_obs > 0 {
            inputs.iter().flat_map(|s| s.values.iter()).sum::<f64>() / n_obs as f64
        } else {
            0.0
        };
        let subjects = inputs
            .into_iter()
            .map(|s| {
                let mut segments = Vec::new();
                for (k, &lo) in breaks.iter().enumerate() {
                    let hi = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY);
                    let start = lo.max(risk_entry);
                    let end = hi.min(s.time);
                    if end > start {
                        segments.push(Segment {
                            piece: k,
                            tau0: start - lag,
                            width: end - start,
                        });
                    }
                }
                JmSubject {
                    id: s.id,
                    female: f64::from(u8::from(s.female)),
                    older: f64::from(u8::from(s.older)),
                    sum_t: s.times.iter().sum(),
                    sum_tt: s.times.iter().map(|t| t * t).sum(),
                    event_piece: piece_of(&breaks, s.time),
                    times: s.times,
                    values: s.values,
                    event: s.event,
                    time: s.time,
                    segments,
                }
            })
            .collect();
        Ok(Self {
            subjects,
            breaks,
            lag,
            risk_entry,
            center,
            n_events,
        })
    }

    /// Log-marker values up to the event or censoring time. With
    /// `exclude_all_missing`, subjects flagged `omit` are left out.
    pub fn from_cohort(cohort: &CohortDataset, spec: &JointModelSpec, exclude_all_missing: bool) -> Result<Self> {
        spec.validate()?;
        let times = cohort.grid.measurement_times();
        let mut inputs = Vec::with_capacity(cohort.subjects.len());
        let mut skipped = 0usize;
        for s in &cohort.subjects {
            if exclude_all_missing && s.omit {
                continue;
            }
            if !(s.time > spec.risk_entry) {
                skipped += 1;
                continue;
            }
            let mut ts = Vec::new();
            let mut ys = Vec::new();
            for (t, v) in times.iter().zip(&s.marker) {
                if let Some(v) = v {
                    if *t <= s.time {
                        ts.push(*t);
                        ys.push(v.ln());
                    }
                }
            }
            inputs.push(SubjectInput {
                id: s.id,
                female: s.female,
                older: s.older,
                times: ts,
                values: ys,
                event: s.event,
                time: s.time,
            });
        }
        if skipped > 0 {
            log::warn!("{skipped} subjects leave follow-up before the risk set opens and are not modelled");
        }
        if inputs.is_empty() {
            return Err(Error::Empty("no subjects left for the joint model"));
        }
        let n_periods = cohort.grid.n_periods() as f64;
        let mut breaks = vec![spec.risk_entry];
        while breaks.last().unwrap() + 1.0 < n_periods {
            let next = breaks.last().unwrap() + 1.0;
            breaks.push(next);
        }
        Self::new(inputs, breaks, spec.lag as f64, spec.risk_entry)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_pieces(&self) -> usize {
        self.breaks.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(JmSubject::n_obs).sum()
    }
}
