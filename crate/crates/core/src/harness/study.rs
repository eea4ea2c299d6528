use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analyze::{fit_and_pool, impute};
use super::config::{Method, StudyConfig};
use super::report::ScenarioReport;
use crate::error::{Error, Result};
use crate::fcs::{imputation_diagnostics, DiagnosticsTable, FcsVersion};
use crate::jm::fit_jm;
use crate::pooling::ReplicationEstimate;
use crate::sim::simulate_cohort;

/// One method's estimate of the association in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub estimate: ReplicationEstimate,
    /// Fraction of missing information; imputation methods only.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: std::result::Result<MethodEstimate, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecords {
    pub index: usize,
    pub n_subjects: usize,
    pub n_events: usize,
    pub missing_fraction: f64,
    pub omit_fraction: f64,
    pub outcomes: Vec<MethodOutcome>,
    /// Per-period completed-value means; present when imputation ran.
    pub diagnostics: Option<DiagnosticsTable>,
}

impl ReplicationRecords {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// Random stream of one replication, a function of the master seed and the
/// index only.
pub fn replication_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one cohort and applies every requested method to it.
pub fn run_replication(config: &StudyConfig, index: usize) -> Result<ReplicationRecords> {
    config.validate()?;
    let mut rng = replication_rng(config.master_seed, index);
    let cohort = simulate_cohort(config.n_subjects, &config.generation(), &mut rng)?.derive_omit();
    // drawn unconditionally so a method's result does not depend on the others
    let fcs_seeds: [u64; 2] = [rng.random(), rng.random()];
    let complete_df = config.complete_df.unwrap_or(f64::INFINITY);
    let jm = &config.joint_model;

    let mut outcomes = Vec::new();
    let mut completed_sets = [None, None];
    for method in config.method_list() {
        let result = match method {
            Method::FullyObservedJm => cohort
                .fully_observed()
                .ok_or_else(|| Error::InvalidCohort("cohort carries no pre-mask values".into()))
                .and_then(|full| fit_jm(&full, jm, false))
                .map(|fit| MethodEstimate {
                    estimate: wald(fit.alpha(), jm.confidence),
                    lambda: None,
                }),
            Method::StandardJm => fit_jm(&cohort, jm, true).map(|fit| MethodEstimate {
                estimate: wald(fit.alpha(), jm.confidence),
                lambda: None,
            }),
            Method::StandardFcsJm | Method::ModifiedFcsJm => {
                let version = method.fcs_version().expect("imputation method");
                let slot = usize::from(version == FcsVersion::Modified);
                impute(&cohort, &config.imputation, version, fcs_seeds[slot]).and_then(|completed| {
                    let pooled = fit_and_pool(&completed, jm, complete_df);
                    completed_sets[slot] = Some(completed);
                    pooled.map(|p| MethodEstimate {
                        estimate: ReplicationEstimate::from_pooled(&p),
                        lambda: Some(p.lambda),
                    })
                })
            }
        };
        if let Err(e) = &result {
            warn!("replication {index}: {method} failed: {e}");
        }
        outcomes.push(MethodOutcome {
            method,
            result: result.map_err(|e| e.to_string()),
        });
    }

    let diagnostics = if completed_sets.iter().any(Option::is_some) {
        let reference = cohort.fully_observed();
        Some(imputation_diagnostics(
            completed_sets[0].as_deref(),
            completed_sets[1].as_deref(),
            reference.as_ref(),
        )?)
    } else {
        None
    };

    Ok(ReplicationRecords {
        index,
        n_subjects: cohort.n_subjects(),
        n_events: cohort.n_events(),
        missing_fraction: cohort.missing_fraction(),
        omit_fraction: cohort.omit_fraction(),
        outcomes,
        diagnostics,
    })
}

fn wald((estimate, se): (f64, f64), confidence: f64) -> ReplicationEstimate {
    ReplicationEstimate::wald(estimate, se, None, confidence)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRun {
    pub report: ScenarioReport,
    pub replications: Vec<ReplicationRecords>,
}

/// Runs every replication on a pool of `config.n_workers` threads and
/// aggregates the results.
pub fn run_study(config: &StudyConfig) -> Result<StudyRun> {
    config.validate()?;
    let mut cfg = config.clone();
    if cfg.n_workers > 1 {
        cfg.joint_model.parallel = false;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.n_workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    info!(
        "{} {} study: {} replications of {} subjects on {} workers",
        cfg.scenario, cfg.hypothesis, cfg.n_replications, cfg.n_subjects, cfg.n_workers
    );
    let replications = pool.install(|| {
        (0..cfg.n_replications)
            .into_par_iter()
            .map(|i| run_replication(&cfg, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = ScenarioReport::aggregate(config, &replications)?;
    Ok(StudyRun { report, replications })
}
