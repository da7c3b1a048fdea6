use thiserror::Error;

/// Errors produced by the scheduling engine and its models.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or input data (bad distribution bounds, malformed job specs).
    #[error("configuration error: {0}")]
    Config(String),

    /// Operation not permitted in the job's current lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Incompatible matrix or tensor dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated an operation precondition (empty input, k = 0, size guards).
    #[error("usage error: {0}")]
    Usage(String),

    /// A fused sequence is routed to a job without an adapter.
    #[error("routing error: no adapter for job `{0}`")]
    Routing(String),

    /// Least-squares fit could not be computed.
    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Fit(_) | Error::Json(_) | Error::Csv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
