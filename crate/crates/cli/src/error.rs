use thiserror::Error;

/// Failures split by exit code: 1 for invalid input, 2 for runtime errors.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<hnpe::Error> for CliError {
    fn from(e: hnpe::Error) -> Self {
        use hnpe::Error as E;
        match e {
            E::DimensionMismatch { .. }
            | E::InvalidArgument(_)
            | E::Config(_)
            | E::ObservationOutOfRange(_)
            | E::ExtraCountMismatch { .. }
            | E::Ingest(_)
            | E::Format(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
