use std::io;

/// Errors produced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (empty input, dimension mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A rule or experiment was configured with infeasible parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed IDX input.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
