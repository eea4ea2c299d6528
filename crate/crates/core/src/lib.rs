//! Multiple imputation of missing-not-at-random longitudinal marker values
//! followed by shared-parameter joint modeling of the marker and a
//! time-to-event outcome.
//!
//! The crate is organised bottom-up:
//!
//! - [`cohort`]: wide-format cohort records, the period grid, the all-missing
//!   flag and long-format export.
//! - [`sim`]: synthetic cohorts from a random intercept/slope marker model, a
//!   discrete-time logistic hazard and shared-parameter missingness.
//! - [`fcs`]: fully conditional specification imputation in the standard and
//!   the modified (all-missing indicator) version.
//! - [`jm`]: maximum likelihood for the lag-1 shared-parameter joint model
//!   with adaptive Gauss-Hermite quadrature.
//! - [`pooling`]: Rubin's rules and Monte Carlo study metrics.
//! - [`harness`]: simulation studies, reports and the two-step analysis of an
//!   ingested cohort.

pub mod cohort;
pub mod error;
pub mod fcs;
pub mod harness;
pub mod jm;
pub mod pooling;
pub mod sim;

pub use cohort::{CohortDataset, LongRow, PeriodGrid, SubjectRecord};
pub use error::{Error, Result};
