use thiserror::Error;

/// Errors returned by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A required CSV column is missing from the header.
    #[error("schema error: missing column '{column}'")]
    Schema { column: String },

    /// A record could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// The data fails a quality gate (too many rows dropped, degenerate sample, ...).
    #[error("data quality: {0}")]
    DataQuality(String),

    /// A numerical routine failed (non-PD matrix, non-finite objective, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An MCMC sampler reached an invalid state.
    #[error("sampler error: {0}")]
    Sampler(String),

    /// Transport-level failure while fetching remote data. Retrying may succeed.
    #[error("transport error (retryable): {0}")]
    Transport(String),

    /// The remote server answered with a non-success status.
    #[error("http status {status}")]
    HttpStatus { status: u16 },

    /// A forecasting protocol was violated (e.g. overlapping fit/evaluation windows).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Model specification is inconsistent.
    #[error("specification error: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Whether retrying the failed operation may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
