use std::io::Write;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::error::{Error, Result};
use crate::fcs::{imputation_diagnostics, run_fcs, truncate_post_event, CompletedDataset, DiagnosticsTable, FcsVersion, ImputationSpec, Subgroup};
use crate::jm::{fit_jm, JointModelSpec};
use crate::pooling::{rubin_pool, PooledEstimate, ReplicationEstimate};

/// Runs one FCS version on a cohort that already carries the omit flag.
pub fn impute(cohort: &CohortDataset, spec: &ImputationSpec, version: FcsVersion, seed: u64) -> Result<Vec<CompletedDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_fcs(cohort, &spec.with_version(version), &mut rng)
}

/// Fits the joint model to every multiple (post-event values removed) and
/// pools the association.
pub fn fit_and_pool(completed: &[CompletedDataset], spec: &JointModelSpec, complete_df: f64) -> Result<PooledEstimate> {
    let fits = completed
        .par_iter()
        .map(|c| fit_jm(&truncate_post_event(c).cohort, spec, false).map(|f| f.alpha()))
        .collect::<Result<Vec<_>>>()?;
    let estimates: Vec<f64> = fits.iter().map(|f| f.0).collect();
    let variances: Vec<f64> = fits.iter().map(|f| f.1 * f.1).collect();
    rubin_pool(&estimates, &variances, spec.confidence, complete_df)
}

/// True when some marker cell within follow-up is missing.
pub fn has_missing_in_follow_up(cohort: &CohortDataset) -> bool {
    let times = cohort.grid.measurement_times();
    cohort
        .subjects
        .iter()
        .any(|s| s.marker.iter().zip(&times).any(|(v, &t)| v.is_none() && t <= s.time))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub imputation: ImputationSpec,
    pub joint_model: JointModelSpec,
    pub complete_df: Option<f64>,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            imputation: ImputationSpec {
                n_multiples: 10,
                ..ImputationSpec::default()
            },
            joint_model: JointModelSpec {
                parallel: true,
                ..JointModelSpec::default()
            },
            complete_df: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardRatio {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl HazardRatio {
    /// Hazard ratio for a log-marker increase of `delta`.
    pub fn from_log_scale(estimate: &ReplicationEstimate, delta: f64) -> Self {
        let (a, b) = ((delta * estimate.ci_low).exp(), (delta * estimate.ci_high).exp());
        Self {
            estimate: (delta * estimate.estimate).exp(),
            ci_low: a.min(b),
            ci_high: a.max(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionResult {
    pub version: FcsVersion,
    /// Number of fitted multiples; 1 when nothing needed imputing.
    pub m: usize,
    pub association: ReplicationEstimate,
    pub lambda: f64,
    pub hr_per_unit: HazardRatio,
    pub hr_per_10_percent: HazardRatio,
}

impl VersionResult {
    fn new(version: FcsVersion, m: usize, association: ReplicationEstimate, lambda: f64) -> Self {
        Self {
            version,
            m,
            association,
            lambda,
            hr_per_unit: HazardRatio::from_log_scale(&association, 1.0),
            hr_per_10_percent: HazardRatio::from_log_scale(&association, 1.1f64.ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_subjects: usize,
    pub n_events: usize,
    pub missing_fraction: f64,
    pub omit_fraction: f64,
    pub versions: Vec<VersionResult>,
    pub diagnostics: DiagnosticsTable,
    /// Mean over periods of the modified/standard completed-value ratio.
    pub mean_ratio_all_missing: Option<f64>,
    pub mean_ratio_rest: Option<f64>,
}

/// Both FCS versions, a joint model per multiple, and Rubin pooling.
pub fn run_two_step(cohort: &CohortDataset, config: &AnalysisConfig) -> Result<AnalysisReport> {
    config.imputation.validate()?;
    config.joint_model.validate()?;
    let cohort = cohort.derive_omit();
    if cohort.n_subjects() == 0 {
        return Err(Error::Empty("no subjects with at least one period of follow-up"));
    }
    let complete_df = config.complete_df.unwrap_or(f64::INFINITY);
    let versions = [FcsVersion::Standard, FcsVersion::Modified];

    let (results, diagnostics) = if has_missing_in_follow_up(&cohort) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seeds: Vec<u64> = versions.iter().map(|_| rng.random()).collect();
        let mut results = Vec::new();
        let mut sets = Vec::new();
        for (&version, &seed) in versions.iter().zip(&seeds) {
            info!("imputing with the {version} FCS version");
            let completed = impute(&cohort, &config.imputation, version, seed)?;
            let pooled = fit_and_pool(&completed, &config.joint_model, complete_df)?;
            results.push(VersionResult::new(version, pooled.m, ReplicationEstimate::from_pooled(&pooled), pooled.lambda));
            sets.push(completed);
        }
        let table = imputation_diagnostics(Some(&sets[0]), Some(&sets[1]), None)?;
        (results, table)
    } else {
        info!("no missing values within follow-up, fitting once");
        let fit = fit_jm(&cohort, &config.joint_model, false)?;
        let (a, se) = fit.alpha();
        let est = ReplicationEstimate::wald(a, se, None, config.joint_model.confidence);
        let results = versions.iter().map(|&v| VersionResult::new(v, 1, est, 0.0)).collect();
        let same = [CompletedDataset {
            multiple_index: 0,
            cohort: cohort.clone(),
            imputed: Vec::new(),
            sweep_means: Vec::new(),
        }];
        (results, imputation_diagnostics(Some(&same), Some(&same), None)?)
    };

    Ok(AnalysisReport {
        n_subjects: cohort.n_subjects(),
        n_events: cohort.n_events(),
        missing_fraction: cohort.missing_fraction(),
        omit_fraction: cohort.omit_fraction(),
        versions: results,
        mean_ratio_all_missing: diagnostics.mean_ratio(Subgroup::AllMissing),
        mean_ratio_rest: diagnostics.mean_ratio(Subgroup::Rest),
        diagnostics,
    })
}

/// [`run_two_step`] on a wide-format CSV cohort.
pub fn run_two_step_on_csv(path: &Path, config: &AnalysisConfig) -> Result<AnalysisReport> {
    let cohort = CohortDataset::read_wide_csv_path(path)?;
    run_two_step(&cohort, config)
}

impl AnalysisReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "version",
            "m",
            "log_hr",
            "se",
            "df",
            "ci_low",
            "ci_high",
            "lambda",
            "hr_unit",
            "hr_unit_low",
            "hr_unit_high",
            "hr_10pct",
            "hr_10pct_low",
            "hr_10pct_high",
        ])?;
        for v in &self.versions {
            let a = &v.association;
            w.write_record([
                v.version.name().to_string(),
                v.m.to_string(),
                a.estimate.to_string(),
                a.se.to_string(),
                a.df.map(|d| d.to_string()).unwrap_or_default(),
                a.ci_low.to_string(),
                a.ci_high.to_string(),
                v.lambda.to_string(),
                v.hr_per_unit.estimate.to_string(),
                v.hr_per_unit.ci_low.to_string(),
                v.hr_per_unit.ci_high.to_string(),
                v.hr_per_10_percent.estimate.to_string(),
                v.hr_per_10_percent.ci_low.to_string(),
                v.hr_per_10_percent.ci_high.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "subjects {}  events {}  missing cells {:.1}%  all-missing subgroup {:.1}%\n\n",
            self.n_subjects,
            self.n_events,
            100.0 * self.missing_fraction,
            100.0 * self.omit_fraction
        );
        out.push_str(&format!(
            "{:<9} {:>3} {:>28} {:>26} {:>7}\n",
            "version", "m", "log HR (95% CI)", "HR per 10% (95% CI)", "lambda"
        ));
        for v in &self.versions {
            let a = &v.association;
            let h = &v.hr_per_10_percent;
            out.push_str(&format!(
                "{:<9} {:>3} {:>28} {:>26} {:>7.3}\n",
                v.version.name(),
                v.m,
                format!("{:.3} ({:.3}, {:.3})", a.estimate, a.ci_low, a.ci_high),
                format!("{:.2} ({:.2}, {:.2})", h.estimate, h.ci_low, h.ci_high),
                v.lambda
            ));
        }
        out.push('\n');
        out.push_str(&self.diagnostics.render_text());
        out
    }

    /// Writes `analysis.csv`, `analysis.txt` and `diagnostics.csv`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("analysis.csv"))?)?;
        std::fs::write(dir.join("analysis.txt"), self.render_text())?;
        self.diagnostics.write_csv(std::fs::File::create(dir.join("diagnostics.csv"))?)?;
        Ok(())
    }
}
