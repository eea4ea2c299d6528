use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::{Method, StudyConfig};
use super::study::ReplicationRecords;
use crate::error::Result;
use crate::fcs::DiagnosticsTable;
use crate::pooling::{compute_metrics, StudyMetrics};
use crate::sim::Hypothesis;

/// Failure rate above which a method's summary is not comparable.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `None` when every replication failed.
    pub metrics: Option<StudyMetrics>,
    pub mean_lambda: Option<f64>,
    pub sd_lambda: Option<f64>,
}

impl MethodSummary {
    pub fn failure_rate(&self) -> f64 {
        let n = self.n_ok + self.n_failed;
        if n == 0 {
            0.0
        } else {
            self.n_failed as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: StudyConfig,
    pub version: String,
    pub truth: f64,
    pub n_replications: usize,
    pub mean_missing_fraction: f64,
    pub mean_omit_fraction: f64,
    pub methods: Vec<MethodSummary>,
    /// Replication average of the per-period tables.
    pub diagnostics: Option<DiagnosticsTable>,
    /// Some method failed in more than 5% of the replications.
    pub non_comparable: bool,
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

impl ScenarioReport {
    pub fn aggregate(config: &StudyConfig, replications: &[ReplicationRecords]) -> Result<Self> {
        let truth = config.truth();
        let mut methods = Vec::new();
        for method in config.method_list() {
            let mut records = Vec::new();
            let mut lambdas = Vec::new();
            let mut n_failed = 0;
            for r in replications {
                match r.outcome(method).map(|o| &o.result) {
                    Some(Ok(e)) => {
                        records.push(e.estimate);
                        lambdas.extend(e.lambda);
                    }
                    _ => n_failed += 1,
                }
            }
            let metrics = if records.is_empty() {
                None
            } else {
                Some(compute_metrics(&records, truth)?)
            };
            let (mean_lambda, sd_lambda) = mean_sd(&lambdas);
            let summary = MethodSummary {
                method,
                n_ok: records.len(),
                n_failed,
                metrics,
                mean_lambda,
                sd_lambda,
            };
            if n_failed > 0 {
                warn!(
                    "{method}: {n_failed} of {} replications failed and are excluded",
                    replications.len()
                );
            }
            methods.push(summary);
        }
        let non_comparable = methods.iter().any(|m| m.failure_rate() > MAX_FAILURE_RATE);
        let tables: Vec<DiagnosticsTable> = replications.iter().filter_map(|r| r.diagnostics.clone()).collect();
        let n = replications.len().max(1) as f64;
        Ok(Self {
            config: config.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            truth,
            n_replications: replications.len(),
            mean_missing_fraction: replications.iter().map(|r| r.missing_fraction).sum::<f64>() / n,
            mean_omit_fraction: replications.iter().map(|r| r.omit_fraction).sum::<f64>() / n,
            methods,
            diagnostics: DiagnosticsTable::average(&tables),
            non_comparable,
        })
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "n_ok",
            "n_failed",
            "truth",
            "mean_estimate",
            "mc_ci_low",
            "mc_ci_high",
            "empirical_sd",
            "percent_bias",
            "rmse",
            "coverage",
            "type1",
            "type1_ci_low",
            "type1_ci_high",
            "mean_lambda",
            "sd_lambda",
            "non_comparable",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.methods {
            let mut row = vec![s.method.name().to_string(), s.n_ok.to_string(), s.n_failed.to_string(), self.truth.to_string()];
            match &s.metrics {
                Some(m) => row.extend([
                    m.mean_estimate.to_string(),
                    m.mean_ci.0.to_string(),
                    m.mean_ci.1.to_string(),
                    m.empirical_variance.sqrt().to_string(),
                    opt(m.percent_bias),
                    m.rmse.to_string(),
                    m.coverage.to_string(),
                    m.type1_rate.to_string(),
                    m.type1_ci.0.to_string(),
                    m.type1_ci.1.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 10)),
            }
            row.push(opt(s.mean_lambda));
            row.push(opt(s.sd_lambda));
            row.push((s.failure_rate() > MAX_FAILURE_RATE).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned tables: estimates in the layout of a bias/coverage table, the
    /// type-I error under the null, and the imputation diagnostics.
    pub fn render_text(&self) -> Result<String> {
        let c = &self.config;
        let mut out = format!(
            "fcsjm {}  scenario {}  hypothesis {}  seed {}\n\
             {} replications of {} subjects, true association {}\n\
             mean missing cells {:.1}%, mean all-missing subgroup {:.1}%\n",
            self.version,
            c.scenario,
            c.hypothesis,
            c.master_seed,
            self.n_replications,
            c.n_subjects,
            self.truth,
            100.0 * self.mean_missing_fraction,
            100.0 * self.mean_omit_fraction
        );
        if self.non_comparable {
            out.push_str("WARNING: failure rate above 5% for some method; results are not comparable\n");
        }
        out.push('\n');
        let null = c.hypothesis == Hypothesis::H0;
        if null {
            out.push_str(&format!(
                "{:<18} {:>5} {:>6} {:>26} {:>8} {:>22} {:>15}\n",
                "method", "ok", "failed", "mean logHR (MC 95% CI)", "RMSE", "type-I (95% CI)", "lambda"
            ));
        } else {
            out.push_str(&format!(
                "{:<18} {:>5} {:>6} {:>26} {:>8} {:>8} {:>8} {:>15}\n",
                "method", "ok", "failed", "mean logHR (MC 95% CI)", "PB %", "RMSE", "coverage", "lambda"
            ));
        }
        for s in &self.methods {
            let lambda = match (s.mean_lambda, s.sd_lambda) {
                (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
                _ => "-".into(),
            };
            let Some(m) = &s.metrics else {
                out.push_str(&format!("{:<18} {:>5} {:>6} all replications failed\n", s.method.name(), s.n_ok, s.n_failed));
                continue;
            };
            let mean = format!("{:.3} ({:.3}, {:.3})", m.mean_estimate, m.mean_ci.0, m.mean_ci.1);
            if null {
                let t1 = format!("{:.3} ({:.3}, {:.3})", m.type1_rate, m.type1_ci.0, m.type1_ci.1);
                out.push_str(&format!(
                    "{:<18} {:>5} {:>6} {:>26} {:>8.4} {:>22} {:>15}\n",
                    s.method.name(),
                    s.n_ok,
                    s.n_failed,
                    mean,
                    m.rmse,
                    t1,
                    lambda
                ));
            } else {
                let pb = m.percent_bias.map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "{:<18} {:>5} {:>6} {:>26} {:>8} {:>8.4} {:>7.1}% {:>15}\n",
                    s.method.name(),
                    s.n_ok,
                    s.n_failed,
                    mean,
                    pb,
                    m.rmse,
                    100.0 * m.coverage,
                    lambda
                ));
            }
        }
        if let Some(d) = &self.diagnostics {
            out.push_str("\nmean completed log-marker per period\n");
            out.push_str(&d.render_text());
        }
        out.push_str("\nconfiguration\n");
        out.push_str(&c.to_json()?);
        out.push('\n');
        Ok(out)
    }

    /// Writes `report.csv`, `report.txt`, `diagnostics.csv` (when imputation
    /// ran), `estimates.csv` and the `config.json` echo.
    pub fn write_outputs(&self, dir: &Path, replications: &[ReplicationRecords]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("report.txt"), self.render_text()?)?;
        if let Some(d) = &self.diagnostics {
            d.write_csv(std::fs::File::create(dir.join("diagnostics.csv"))?)?;
        }
        write_estimates(std::fs::File::create(dir.join("estimates.csv"))?, replications)?;
        std::fs::write(dir.join("config.json"), self.config.to_json()? + "\n")?;
        Ok(())
    }
}

/// One row per replication and method.
pub fn write_estimates<W: Write>(writer: W, replications: &[ReplicationRecords]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "replication",
        "method",
        "status",
        "estimate",
        "se",
        "df",
        "ci_low",
        "ci_high",
        "lambda",
        "message",
    ])?;
    for r in replications {
        for o in &r.outcomes {
            let mut row = vec![r.index.to_string(), o.method.name().to_string()];
            match &o.result {
                Ok(e) => {
                    let est = &e.estimate;
                    row.extend([
                        "ok".to_string(),
                        est.estimate.to_string(),
                        est.se.to_string(),
                        est.df.map(|d| d.to_string()).unwrap_or_default(),
                        est.ci_low.to_string(),
                        est.ci_high.to_string(),
                        e.lambda.map(|l| l.to_string()).unwrap_or_default(),
                        String::new(),
                    ]);
                }
                Err(msg) => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), 6));
                    row.push(msg.clone());
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
