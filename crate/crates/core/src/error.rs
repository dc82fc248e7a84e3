use thiserror::Error;

/// Errors raised by solvers, models and I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain evaluation error: {0}")]
    Domain(String),

    #[error("moment condition violated: {0}")]
    MomentCondition(String),

    #[error("mgf argument {s} outside domain (must be below {limit})")]
    MgfDomain { s: f64, limit: f64 },

    #[error("series diverged: {0}")]
    Divergence(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),

    #[error("filter degeneracy: {0}")]
    FilterDegeneracy(String),

    #[error("data error at row {row}: {msg}")]
    Data { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors caused by bad inputs rather than by a solver.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_) | Error::Data { .. } | Error::Csv(_) | Error::Json(_) | Error::Io(_)
        )
    }
}
