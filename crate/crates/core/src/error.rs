use thiserror::Error;

/// Errors raised across data handling, imputation, model fitting and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
    #[error("ingestion error at row {row}, column `{column}`: {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },
    #[error("imputation failed for period {period}: {message}")]
    Imputation { period: usize, message: String },
    #[error("parameters outside the model domain: {0}")]
    Domain(String),
    #[error(
        "optimizer did not converge after {iterations} iterations \
         (best log-likelihood {loglik:.6}, gradient max-norm {grad_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        loglik: f64,
        grad_norm: f64,
    },
    #[error("no events in the analysis data")]
    NoEvents,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("Rubin pooling needs at least two multiples, got {0}")]
    TooFewMultiples(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
