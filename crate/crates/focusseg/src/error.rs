use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid (even kernel, bad ratio, channel mismatch, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A configuration is valid in general but not supported by this code path.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Training produced a non-finite loss; aborted rather than silently skipped.
    #[error("non-finite loss ({value}) at iteration {iteration} (seed {seed}); offending batch indices {batch:?}")]
    NonFiniteLoss {
        value: f64,
        iteration: usize,
        seed: u64,
        batch: Vec<usize>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
