use std::io;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in something malformed: bad index, wrong shape, empty set.
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced a non-finite value or hit a zero probability.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The state space is too large to enumerate.
    #[error("refusing to enumerate {states} states (cap is {cap})")]
    EnumerationCap { states: u64, cap: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
