use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data corruption: {0}")]
    Corrupt(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at batch {batch} (max |grad| = {max_abs_grad:e})")]
    NonFiniteLoss { batch: usize, max_abs_grad: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent data rather than by
    /// how the API was called.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Corrupt(_) | Error::Format(_) | Error::Io(_) | Error::Input(_)
        )
    }
}
