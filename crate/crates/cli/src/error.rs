use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed config, unreadable or inconsistent inputs.
    #[error("{0}")]
    BadInput(String),
    /// The optimizer produced non-finite values or an unusable map.
    #[error("{0}")]
    Diverged(String),
    /// A validation gate (gradient check, accuracy thresholds) was not met.
    #[error("{0}")]
    GateFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::GateFailed(_) => 4,
        }
    }

    pub fn bad(msg: impl Into<String>) -> Self {
        CliError::BadInput(msg.into())
    }
}

impl From<lot_core::Error> for CliError {
    fn from(e: lot_core::Error) -> Self {
        use lot_core::Error as E;
        match e {
            E::Diverged(_) | E::NonFinite(_) | E::NonInvertible(_) => CliError::Diverged(e.to_string()),
            _ => CliError::BadInput(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::BadInput(e.to_string())
    }
}
