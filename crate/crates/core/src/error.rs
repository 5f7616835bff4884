use std::path::PathBuf;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The bisection bracket does not enclose the requested delta.
    #[error("cannot reach delta={delta} at epsilon={epsilon}: bracket covers [{low:e}, {high:e}]")]
    Bracket {
        epsilon: f64,
        delta: f64,
        low: f64,
        high: f64,
    },

    /// A linear system is not positive definite enough to factor.
    #[error("near-singular system: {0}")]
    Singular(String),

    /// A floating-point computation produced a value that signals a bug.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Fixed-point iteration ran out of iterations.
    #[error("no convergence after {iterations} iterations (last update {last_update:e})")]
    NoConvergence { iterations: usize, last_update: f64 },

    /// The releases of a fit composed to more than the budget allows.
    #[error("privacy ledger composes to {spent}, exceeding budget {budget}")]
    BudgetExceeded { spent: f64, budget: f64 },

    /// Malformed input data, with location where known.
    #[error("{path}: {message}")]
    Data { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
