//! Mapping of errors to process exit codes.

use std::path::Path;

use sepconv::Error;

use crate::config::ConfigError;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_CHECKPOINT_VERSION: i32 = 4;
pub const EXIT_OUTPUT: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    CheckpointVersion(String),
    #[error("{0}")]
    Output(String),
    #[error("{0}")]
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Input(_) => EXIT_INPUT,
            Failure::CheckpointVersion(_) => EXIT_CHECKPOINT_VERSION,
            Failure::Output(_) => EXIT_OUTPUT,
            Failure::Other(_) => EXIT_OTHER,
        }
    }

    /// Classify a library error. I/O errors on paths under one of `outputs`
    /// count as output failures, all other I/O errors as input failures.
    pub fn from_error(e: Error, outputs: &[&Path]) -> Self {
        let msg = e.to_string();
        match e {
            Error::CheckpointVersion { .. } => Failure::CheckpointVersion(msg),
            Error::Config(_) => Failure::Usage(msg),
            Error::ImageEncode { .. } => Failure::Output(msg),
            Error::Io { ref path, .. } if outputs.iter().any(|o| path.starts_with(o)) => {
                Failure::Output(msg)
            }
            Error::Io { .. }
            | Error::ImageDecode { .. }
            | Error::Checkpoint { .. }
            | Error::Record { .. }
            | Error::Dataset(_)
            | Error::Flow { .. }
            | Error::Dimension(_)
            | Error::ExtractorUnavailable { .. } => Failure::Input(msg),
            Error::NonFiniteGradient(_) => Failure::Other(msg),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}
