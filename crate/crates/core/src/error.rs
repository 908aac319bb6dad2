use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation precondition (zero norm, shape mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite value encountered during training.
    #[error("numerical failure in `{block}`: {detail}")]
    Numerical { block: String, detail: String },
    /// Cached forward activations were missing or inconsistent.
    #[error("internal error: {0}")]
    Internal(String),
    /// Malformed checkpoint or serialized artifact.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
