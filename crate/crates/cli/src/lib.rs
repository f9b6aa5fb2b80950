//! The `mamoc` pipeline driver: dataset simulation, the two training phases,
//! test-time correction and evaluation.

pub mod commands;
pub mod config;

use mamoc_core::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("no checkpoint at {0}; pass --cold-start to fine-tune from a fresh initialization")]
    MissingCheckpoint(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    /// 2 configuration, 3 I/O, 4 shape or data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingCheckpoint(_) | CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                Error::BadConfig(_)
                | Error::BadSpec(_)
                | Error::BadSeverity(_)
                | Error::BadProbability(_)
                | Error::DegenerateFraction(_)
                | Error::IndivisibleBlock { .. }
                | Error::IndivisibleWindow { .. }
                | Error::OddSide(_)
                | Error::OddChannels(_)
                | Error::BadEpsilon(_) => 2,
                Error::IoFailure(_) => 3,
                _ => 4,
            },
        }
    }
}
