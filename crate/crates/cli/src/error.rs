use btn::BtnError;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0} certified-bound violation(s) found")]
    Violations(usize),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Violations(_) => 5,
            CliError::Other(_) => 1,
        })
    }

    /// Library errors raised while checking a configuration all map to exit 2.
    pub fn config(e: BtnError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BtnError> for CliError {
    fn from(e: BtnError) -> Self {
        let msg = e.to_string();
        match e {
            BtnError::InvalidConfig { .. } | BtnError::InvalidPerturbation(_) | BtnError::Geometry(_) => {
                CliError::Config(msg)
            }
            BtnError::Io { .. }
            | BtnError::Stream(_)
            | BtnError::MissingFile(_)
            | BtnError::Checksum { .. }
            | BtnError::Truncated(_)
            | BtnError::MagicMismatch { .. }
            | BtnError::VersionMismatch { .. }
            | BtnError::Malformed { .. }
            | BtnError::Json(_) => CliError::Io(msg),
            BtnError::Diverged { .. } => CliError::Diverged(msg),
            _ => CliError::Other(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
