//! Simulation studies and the two-step analysis.
//!
//! A study replicates one scenario: every replication draws a cohort from
//! its own random stream (a function of the master seed and the replication
//! index), applies the requested methods and records the association
//! estimate of each. Failed fits are tallied and excluded.

pub mod analyze;
pub mod config;
pub mod report;
pub mod study;

pub use analyze::{run_two_step, run_two_step_on_csv, AnalysisConfig, AnalysisReport, HazardRatio, VersionResult};
pub use config::{Method, Profile, StudyConfig};
pub use report::{MethodSummary, ScenarioReport};
pub use study::{run_replication, run_study, MethodEstimate, MethodOutcome, ReplicationRecords, StudyRun};
