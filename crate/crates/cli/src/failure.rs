use std::fmt;

use slca_core::train::CheckpointError;
use slca_core::Error;

/// A command failure together with the process exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2: invalid configuration, flags or input geometry.
    Config(String),
    /// Exit 3: a file could not be read or written.
    Io(String),
    /// Exit 4: training produced a non-finite value.
    Numeric(String),
    /// Exit 5: a verification check failed.
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Verification(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Svol(_) => Failure::Io(msg),
            Error::Checkpoint(CheckpointError::ConfigMismatch(_)) => Failure::Config(msg),
            Error::Checkpoint(_) => Failure::Io(msg),
            Error::NumericFailure { .. } | Error::NonFinite { .. } | Error::GradCheckNonFinite { .. } => {
                Failure::Numeric(msg)
            }
            _ => Failure::Config(msg),
        }
    }
}

impl From<slca_core::data::SvolError> for Failure {
    fn from(e: slca_core::data::SvolError) -> Self {
        Failure::Io(e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}
