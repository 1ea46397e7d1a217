//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: config errors exit 2, input errors
//! exit 3, degenerate-data errors exit 4 and numerical failures exit 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) | Error::Io(_) => 3,
            Error::Degenerate(_) => 4,
            Error::Numerical(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
