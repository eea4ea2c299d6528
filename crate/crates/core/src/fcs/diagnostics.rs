//! Completed-value means per period, by subgroup and FCS version.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{CompletedDataset, FcsVersion};
use crate::cohort::CohortDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    AllMissing,
    Rest,
}

impl Subgroup {
    pub fn name(&self) -> &'static str {
        match self {
            Self::AllMissing => "all_missing",
            Self::Rest => "rest",
        }
    }
}

/// Mean completed log-marker of one period within one subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    /// 1-based period.
    pub period: usize,
    pub subgroup: Subgroup,
    pub n_subjects: f64,
    pub fully_observed: Option<f64>,
    pub standard: Option<f64>,
    pub modified: Option<f64>,
}

impl DiagnosticsRow {
    /// Modified-to-standard ratio of the completed means.
    pub fn ratio(&self) -> Option<f64> {
        match (self.modified, self.standard) {
            (Some(m), Some(s)) if s != 0.0 => Some(m / s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsTable {
    pub rows: Vec<DiagnosticsRow>,
}

/// Mean log-value per (subgroup, period), averaged over the multiples.
/// Values after the event are included.
fn completed_means(sets: &[CompletedDataset], n_periods: usize) -> [Vec<Option<f64>>; 2] {
    let mut out = [vec![None; n_periods], vec![None; n_periods]];
    for (g, subgroup) in [Subgroup::AllMissing, Subgroup::Rest].into_iter().enumerate() {
        for j in 0..n_periods {
            let mut per_multiple = Vec::with_capacity(sets.len());
            for d in sets {
                let vals: Vec<f64> = d
                    .cohort
                    .subjects
                    .iter()
                    .filter(|s| (s.omit) == (subgroup == Subgroup::AllMissing))
                    .filter_map(|s| s.marker[j].map(f64::ln))
                    .collect();
                if !vals.is_empty() {
                    per_multiple.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            if !per_multiple.is_empty() {
                out[g][j] = Some(per_multiple.iter().sum::<f64>() / per_multiple.len() as f64);
            }
        }
    }
    out
}

/// Builds the per-period table for the all-missing subgroup and the rest of
/// the sample. `reference`, when given, supplies fully observed values for
/// the same subjects in the same order.
pub fn imputation_diagnostics(
    standard: Option<&[CompletedDataset]>,
    modified: Option<&[CompletedDataset]>,
    reference: Option<&CohortDataset>,
) -> Result<DiagnosticsTable> {
    let base = standard
        .and_then(|s| s.first())
        .or_else(|| modified.and_then(|m| m.first()))
        .ok_or(Error::Empty("diagnostics need at least one completed dataset"))?;
    let n_periods = base.cohort.grid.n_periods();
    let groups: Vec<bool> = base.cohort.subjects.iter().map(|s| s.omit).collect();

    let std_means = standard.map(|s| completed_means(s, n_periods));
    let mod_means = modified.map(|m| completed_means(m, n_periods));
    let ref_means = match reference {
        Some(r) => {
            if r.subjects.len() != groups.len()
                || r.subjects.iter().zip(&base.cohort.subjects).any(|(a, b)| a.id != b.id)
            {
                return Err(Error::InvalidCohort(
                    "reference cohort does not match the completed datasets".into(),
                ));
            }
            // carry the subgroup flag over so the same helper applies
            let mut tagged = r.clone();
            for (s, &g) in tagged.subjects.iter_mut().zip(&groups) {
                s.omit = g;
            }
            let as_completed = CompletedDataset {
                multiple_index: 0,
                cohort: tagged,
                imputed: Vec::new(),
                sweep_means: Vec::new(),
            };
            Some(completed_means(std::slice::from_ref(&as_completed), n_periods))
        }
        None => None,
    };

    let mut rows = Vec::with_capacity(2 * n_periods);
    for (g, subgroup) in [Subgroup::AllMissing, Subgroup::Rest].into_iter().enumerate() {
        let n_subjects = groups
            .iter()
            .filter(|&&o| o == (subgroup == Subgroup::AllMissing))
            .count() as f64;
        for j in 0..n_periods {
            rows.push(DiagnosticsRow {
                period: j + 1,
                subgroup,
                n_subjects,
                fully_observed: ref_means.as_ref().and_then(|m| m[g][j]),
                standard: std_means.as_ref().and_then(|m| m[g][j]),
                modified: mod_means.as_ref().and_then(|m| m[g][j]),
            });
        }
    }
    Ok(DiagnosticsTable { rows })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl DiagnosticsTable {
    pub fn rows_for(&self, subgroup: Subgroup) -> impl Iterator<Item = &DiagnosticsRow> {
        self.rows.iter().filter(move |r| r.subgroup == subgroup)
    }

    /// Mean over periods of the modified-to-standard ratio.
    pub fn mean_ratio(&self, subgroup: Subgroup) -> Option<f64> {
        mean_of(self.rows_for(subgroup).map(DiagnosticsRow::ratio))
    }

    pub fn column(&self, version: FcsVersion, subgroup: Subgroup) -> Vec<Option<f64>> {
        self.rows_for(subgroup)
            .map(|r| match version {
                FcsVersion::Standard => r.standard,
                FcsVersion::Modified => r.modified,
            })
            .collect()
    }

    /// Cell-wise average over tables with identical layout; cells missing in
    /// some tables are averaged over the tables that have them.
    pub fn average(tables: &[DiagnosticsTable]) -> Option<DiagnosticsTable> {
        let first = tables.first()?;
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(idx, r)| {
                let cells = |f: fn(&DiagnosticsRow) -> Option<f64>| mean_of(tables.iter().map(|t| f(&t.rows[idx])));
                DiagnosticsRow {
                    period: r.period,
                    subgroup: r.subgroup,
                    n_subjects: tables.iter().map(|t| t.rows[idx].n_subjects).sum::<f64>() / tables.len() as f64,
                    fully_observed: cells(|r| r.fully_observed),
                    standard: cells(|r| r.standard),
                    modified: cells(|r| r.modified),
                }
            })
            .collect();
        Some(DiagnosticsTable { rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "subgroup",
            "period",
            "n_subjects",
            "fully_observed",
            "standard_fcs",
            "modified_fcs",
            "ratio_modified_to_standard",
        ])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.subgroup.name().to_string(),
                r.period.to_string(),
                format!("{:.2}", r.n_subjects),
                fmt(r.fully_observed),
                fmt(r.standard),
                fmt(r.modified),
                fmt(r.ratio()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text rendering, one block per subgroup.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:>9.4}")).unwrap_or_else(|| format!("{:>9}", "-"));
        for subgroup in [Subgroup::AllMissing, Subgroup::Rest] {
            let n = self.rows_for(subgroup).next().map(|r| r.n_subjects).unwrap_or(0.0);
            out.push_str(&format!("{} subgroup (mean size {:.1})\n", subgroup.name(), n));
            out.push_str(&format!(
                "{:>6} {:>9} {:>9} {:>9} {:>9}\n",
                "period", "full", "standard", "modified", "ratio"
            ));
            for r in self.rows_for(subgroup) {
                out.push_str(&format!(
                    "{:>6} {} {} {} {}\n",
                    r.period,
                    fmt(r.fully_observed),
                    fmt(r.standard),
                    fmt(r.modified),
                    fmt(r.ratio())
                ));
            }
            out.push_str(&format!("mean ratio: {}\n\n", fmt(self.mean_ratio(subgroup)).trim()));
        }
        out
    }
}
