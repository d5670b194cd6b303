//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; maps to CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed, missing or invariant-violating input data.
    #[error("data error: {0}")]
    Data(String),

    /// A report labeler failed or returned a malformed answer. Labeling
    /// errors are never silently defaulted.
    #[error("labeling error: {0}")]
    Labeling(String),

    /// A treatment arm is empty or degenerate where both arms are required.
    #[error("positivity violation: {0}")]
    Positivity(String),

    /// Numeric failure (non-finite inputs, degenerate estimation).
    #[error("computation error: {0}")]
    Computation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
