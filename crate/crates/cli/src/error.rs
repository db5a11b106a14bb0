use thiserror::Error;

use rep_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("theory invariant violated: {0}")]
    Invariant(String),

    #[error("no blow-up detected before t_max ({0})")]
    NoEvent(String),

    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    /// 2 config, 3 numeric, 4 theory invariant, 5 no event, 1 output I/O.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::NoEvent(_) => 5,
            CliError::Output(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NoBlowupBeforeTmax(_) | CoreError::NearCollision { .. } => {
                CliError::NoEvent(e.to_string())
            }
            CoreError::NonPositiveParameter { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::DimensionTooSmall(_)
            | CoreError::NonFiniteInput(_)
            | CoreError::InvalidControl(_)
            | CoreError::InvalidFamily(_) => CliError::Config(e.to_string()),
            e => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}
