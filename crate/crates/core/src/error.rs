use thiserror::Error;

/// Errors raised across the inference toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("observation {0} outside the open unit interval")]
    ObservationOutOfRange(f64),

    #[error("posterior support degenerates to a point mass at {location}")]
    PointMass { location: f64 },

    #[error("integration produced a non-finite state at step {step}")]
    IntegrationFailure { step: usize },

    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),

    #[error("simulator failure rate {rate:.3} exceeds the allowed {limit:.3}")]
    SimulatorFailureRate { rate: f64, limit: f64 },

    #[error("could not draw a proposal sample inside the prior box after {0} tries")]
    ProposalRejection(usize),

    #[error("bundle has N = {got} extra observations but the model was trained with N = {expected}")]
    ExtraCountMismatch { expected: usize, got: usize },

    #[error("too few successful repetitions: {ok} of {total} (need at least {min})")]
    TooFewRepetitions { ok: usize, total: usize, min: usize },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
