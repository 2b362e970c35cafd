//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad keys, invalid counts, infeasible specs).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / manifest problems (missing files, malformed records).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint save/load failures, including shape mismatches.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Stage run out of order (e.g. SII before MsPL output exists).
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// Malformed operation input (shape/label/modality violations).
    #[error("input error: {0}")]
    Input(String),

    /// Evaluation protocol infeasible (e.g. empty gallery after filtering).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A numerical guard fired (e.g. zero-norm vector clamped at epsilon).
    #[error("numerical guard: {0}")]
    NumericalGuard(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 config, 3 data, 4 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Data(_) | Error::Protocol(_) | Error::NumericalGuard(_) | Error::Io(_) => 3,
            Error::Checkpoint(_) | Error::Sequencing(_) => 4,
        }
    }
}
