use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: {count} exceeds the cap of {cap}")]
    Capacity { count: u128, cap: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
