//! Wide-format cohort records shared by simulation, imputation and fitting.
//!
//! A cohort lives on a common [`PeriodGrid`]: period `j` (1-based) covers the
//! interval `(j - 1, j]` and its marker is measured at the midpoint `j - 0.5`.
//! Missing marker cells are `None`; observed cells are never rewritten by any
//! transform in this module.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Common period grid with `n_periods` marker measurement occasions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodGrid {
    n_periods: usize,
}

impl PeriodGrid {
    pub fn new(n_periods: usize) -> Result<Self> {
        if n_periods == 0 {
            return Err(Error::Config("period grid needs at least one period".into()));
        }
        Ok(Self { n_periods })
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Measurement time of 1-based period `j`, the midpoint `j - 0.5`.
    pub fn measurement_time(&self, j: usize) -> f64 {
        debug_assert!(j >= 1 && j <= self.n_periods);
        j as f64 - 0.5
    }

    /// Measurement times indexed by 0-based column.
    pub fn measurement_times(&self) -> Vec<f64> {
        (1..=self.n_periods).map(|j| self.measurement_time(j)).collect()
    }
}

/// Quantities only known for simulated cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Random intercept deviation.
    pub a: f64,
    /// Random slope deviation.
    pub b: f64,
    /// True log-marker `m_i(j)` per period.
    pub log_marker: Vec<f64>,
    /// Marker values on the natural scale before any masking.
    pub full_marker: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u64,
    pub female: bool,
    pub older: bool,
    /// Marker per period on the natural (positive) scale; `None` when missing.
    pub marker: Vec<Option<f64>>,
    pub event: bool,
    /// Continuous event or censoring time.
    pub time: f64,
    /// Member of the all-missing subgroup.
    pub omit: bool,
    pub latent: Option<LatentState>,
}

impl SubjectRecord {
    /// Discrete period containing the follow-up time, `ceil(time)`.
    pub fn event_period(&self) -> usize {
        self.time.ceil().max(0.0) as usize
    }

    pub fn n_observed(&self) -> usize {
        self.marker.iter().filter(|m| m.is_some()).count()
    }
}

/// One row of the long format: a non-missing marker value at its measurement time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub id: u64,
    pub time: f64,
    pub log_marker: f64,
    pub female: bool,
    pub older: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub grid: PeriodGrid,
    pub subjects: Vec<SubjectRecord>,
    pub scenario_tag: String,
}

impl CohortDataset {
    /// Builds a cohort after checking grid agreement, id uniqueness, positive
    /// markers and finite nonnegative follow-up times.
    pub fn new(
        grid: PeriodGrid,
        subjects: Vec<SubjectRecord>,
        scenario_tag: impl Into<String>,
    ) -> Result<Self> {
        let cohort = Self {
            grid,
            subjects,
            scenario_tag: scenario_tag.into(),
        };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.grid.n_periods();
        let mut ids = HashSet::with_capacity(self.subjects.len());
        for s in &self.subjects {
            if !ids.insert(s.id) {
                return Err(Error::InvalidCohort(format!("duplicate subject id {}", s.id)));
            }
            if s.marker.len() != j {
                return Err(Error::InvalidCohort(format!(
                    "subject {} has {} marker cells, grid has {j}",
                    s.id,
                    s.marker.len()
                )));
            }
            if s.marker.iter().flatten().any(|&v| !(v.is_finite() && v > 0.0)) {
                return Err(Error::InvalidCohort(format!(
                    "subject {} has a non-positive marker value",
                    s.id
                )));
            }
            if !(s.time.is_finite() && s.time >= 0.0) {
                return Err(Error::InvalidCohort(format!(
                    "subject {} has invalid follow-up time {}",
                    s.id, s.time
                )));
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    /// Flags the all-missing subgroup and drops subjects followed for less
    /// than one period.
    ///
    /// Among the periods measured at or before a subject's follow-up time,
    /// `omit` is set exactly when every one of them is missing.
    pub fn derive_omit(&self) -> CohortDataset {
        let times = self.grid.measurement_times();
        let subjects = self
            .subjects
            .iter()
            .filter(|s| s.time >= 1.0)
            .map(|s| {
                let mut n_meas = 0usize;
                let mut n_miss = 0usize;
                for (value, &t) in s.marker.iter().zip(&times) {
                    if t <= s.time {
                        n_meas += 1;
                        if value.is_none() {
                            n_miss += 1;
                        }
                    }
                }
                let mut out = s.clone();
                out.omit = n_miss == n_meas;
                out
            })
            .collect();
        CohortDataset {
            grid: self.grid,
            subjects,
            scenario_tag: self.scenario_tag.clone(),
        }
    }

    /// One row per non-missing cell; with `drop_post_event`, cells measured
    /// after the follow-up time are skipped.
    pub fn to_long_format(&self, drop_post_event: bool) -> Vec<LongRow> {
        let times = self.grid.measurement_times();
        let mut rows = Vec::new();
        for s in &self.subjects {
            for (value, &t) in s.marker.iter().zip(&times) {
                let Some(v) = value else { continue };
                if drop_post_event && t > s.time {
                    continue;
                }
                rows.push(LongRow {
                    id: s.id,
                    time: t,
                    log_marker: v.ln(),
                    female: s.female,
                    older: s.older,
                });
            }
        }
        rows
    }

    /// The same cohort with every marker cell set to its pre-mask value.
    /// Returns `None` unless every subject carries latent state.
    pub fn fully_observed(&self) -> Option<CohortDataset> {
        let mut subjects = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let latent = s.latent.as_ref()?;
            let mut out = s.clone();
            out.marker = latent.full_marker.iter().map(|&v| Some(v)).collect();
            out.omit = false;
            subjects.push(out);
        }
        Some(CohortDataset {
            grid: self.grid,
            subjects,
            scenario_tag: format!("{}:fully_observed", self.scenario_tag),
        })
    }

    /// Fraction of all marker cells that are missing.
    pub fn missing_fraction(&self) -> f64 {
        let total = self.subjects.len() * self.grid.n_periods();
        if total == 0 {
            return 0.0;
        }
        let missing: usize = self
            .subjects
            .iter()
            .map(|s| s.marker.iter().filter(|m| m.is_none()).count())
            .sum();
        missing as f64 / total as f64
    }

    pub fn omit_fraction(&self) -> f64 {
        if self.subjects.is_empty() {
            return 0.0;
        }
        self.subjects.iter().filter(|s| s.omit).count() as f64 / self.subjects.len() as f64
    }

    pub fn write_wide_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "female".into(), "older".into()];
        header.extend((1..=self.grid.n_periods()).map(|j| format!("h{j}")));
        header.push("event".into());
        header.push("time".into());
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut rec = vec![
                s.id.to_string(),
                u8::from(s.female).to_string(),
                u8::from(s.older).to_string(),
            ];
            rec.extend(s.marker.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
            rec.push(u8::from(s.event).to_string());
            rec.push(s.time.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_wide_csv_path(&self, path: &Path) -> Result<()> {
        self.write_wide_csv(std::fs::File::create(path)?)
    }

    /// Parses the wide schema `id, female, older, h1..hJ, event, time`.
    /// Empty marker cells are missing; `omit` is left unset.
    pub fn read_wide_csv<R: Read>(reader: R, scenario_tag: &str) -> Result<CohortDataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
        let n = header.len();
        let schema_err = |column: &str, message: String| Error::Ingest {
            row: 0,
            column: column.to_string(),
            message,
        };
        if n < 6 {
            return Err(schema_err(
                "<header>",
                format!("expected id, female, older, h1..hJ, event, time; got {n} columns"),
            ));
        }
        for (idx, name) in [(0, "id"), (1, "female"), (2, "older")] {
            if header[idx] != name {
                return Err(schema_err(&header[idx], format!("expected column `{name}`")));
            }
        }
        if header[n - 2] != "event" {
            return Err(schema_err(&header[n - 2], "expected column `event`".into()));
        }
        if header[n - 1] != "time" {
            return Err(schema_err(&header[n - 1], "expected column `time`".into()));
        }
        let n_periods = n - 5;
        for j in 1..=n_periods {
            let expected = format!("h{j}");
            if header[2 + j] != expected {
                return Err(schema_err(&header[2 + j], format!("expected column `{expected}`")));
            }
        }
        let grid = PeriodGrid::new(n_periods)?;

        let mut subjects = Vec::new();
        let mut ids = HashSet::new();
        for (r, record) in rdr.records().enumerate() {
            let row = r + 1;
            let record = record?;
            if record.len() != n {
                return Err(Error::Ingest {
                    row,
                    column: "<record>".into(),
                    message: format!("expected {n} fields, found {}", record.len()),
                });
            }
            let err = |col: usize, message: String| Error::Ingest {
                row,
                column: header[col].clone(),
                message,
            };
            let id: u64 = record[0]
                .parse()
                .map_err(|_| err(0, format!("`{}` is not a nonnegative integer", &record[0])))?;
            if !ids.insert(id) {
                return Err(err(0, format!("duplicate id {id}")));
            }
            let flag = |col: usize| -> Result<bool> {
                match &record[col] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    "" => Err(err(col, "empty cell".into())),
                    other => Err(err(col, format!("`{other}` is not 0 or 1"))),
                }
            };
            let female = flag(1)?;
            let older = flag(2)?;
            let mut marker = Vec::with_capacity(n_periods);
            for col in 3..3 + n_periods {
                let cell = &record[col];
                if cell.is_empty() || cell == "." {
                    marker.push(None);
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(col, format!("`{cell}` is not a number")))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(err(col, format!("marker value {v} must be positive")));
                }
                marker.push(Some(v));
            }
            let event = flag(n - 2)?;
            let time: f64 = record[n - 1]
                .parse()
                .map_err(|_| err(n - 1, format!("`{}` is not a number", &record[n - 1])))?;
            if !(time.is_finite() && time >= 0.0) {
                return Err(err(n - 1, format!("follow-up time {time} must be nonnegative")));
            }
            subjects.push(SubjectRecord {
                id,
                female,
                older,
                marker,
                event,
                time,
                omit: false,
                latent: None,
            });
        }
        if subjects.is_empty() {
            return Err(Error::Empty("cohort CSV has no subject rows"));
        }
        CohortDataset::new(grid, subjects, scenario_tag)
    }

    pub fn read_wide_csv_path(path: &Path) -> Result<CohortDataset> {
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_wide_csv(std::fs::File::open(path)?, &tag)
    }

    pub fn write_long_csv<W: Write>(&self, writer: W, drop_post_event: bool) -> Result<()> {
        write_long_rows(writer, &self.to_long_format(drop_post_event))
    }
}

pub fn write_long_rows<W: Write>(writer: W, rows: &[LongRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "time", "log_marker", "female", "older"])?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.time.to_string(),
            r.log_marker.to_string(),
            u8::from(r.female).to_string(),
            u8::from(r.older).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
