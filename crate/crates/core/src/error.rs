//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed input data; `detail` carries file line numbers and subject
    /// ids where applicable.
    #[error("invalid data: {detail}")]
    InvalidData { detail: String },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {detail}")]
    InvalidArgument { detail: String },

    /// A model had to be fit on a stratum that contains no observations.
    #[error("empty stratum at visit {visit}: {detail}")]
    EmptyStratum { visit: usize, detail: String },

    /// An iterative solver did not reach its tolerance.
    #[error("{what} failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// A linear system was too ill-conditioned to solve.
    #[error("singular system in {context}")]
    SingularSystem { context: String },

    /// Too many bootstrap replicates failed to produce an estimate.
    #[error("{failed} of {requested} bootstrap replicates failed (limit {limit})")]
    BootstrapFailures {
        failed: usize,
        requested: usize,
        limit: usize,
    },

    /// The calibration search could not bracket or reach the target effect.
    #[error("calibration failed: {detail}")]
    CalibrationFailed { detail: String },

    /// Simulation replicates failed beyond the tolerated fraction.
    #[error("{failed} of {requested} simulation replicates failed for method {method}")]
    ReplicateFailures {
        method: String,
        failed: usize,
        requested: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn invalid_data(detail: impl Into<String>) -> Self {
        CoreError::InvalidData {
            detail: detail.into(),
        }
    }

    pub fn invalid_argument(detail: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
