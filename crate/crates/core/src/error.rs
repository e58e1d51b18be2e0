use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was given tensors whose shapes do not compose.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A serialized container (checkpoint, dataset, attack batch) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
