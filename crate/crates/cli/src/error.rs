use std::fmt::Display;

use spdelab::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("assumption audit blocks the request: {0}")]
    Audit(String),

    #[error("acceptance failed: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(key: &str, message: impl Display) -> Self {
        Self::Config {
            key: key.to_string(),
            message: message.to_string(),
        }
    }

    /// 2 config, 3 unmet assumption, 4 acceptance, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Audit(_) => 3,
            Self::Acceptance(_) => 4,
            Self::Core(e) => match e {
                CoreError::InvalidParameter { .. }
                | CoreError::DimensionMismatch { .. }
                | CoreError::Positivity { .. }
                | CoreError::NotInCameronMartin { .. }
                | CoreError::Empty { .. } => 2,
                CoreError::Coercivity { .. }
                | CoreError::AuditFailed { .. }
                | CoreError::HypothesisUnmet { .. }
                | CoreError::W4Violated { .. }
                | CoreError::NonAdmissiblePair { .. }
                | CoreError::VacuousBound { .. } => 3,
                _ => 1,
            },
            Self::Io(_) | Self::Csv(_) => 1,
        }
    }
}
