use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: String,
        got: String,
        context: &'static str,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: checkpoint {stored} vs current {current}")]
    DigestMismatch { stored: String, current: String },

    #[error("non-finite loss term '{term}' at step {step}; diagnostics at {dump:?}")]
    NonFiniteLoss {
        term: &'static str,
        step: u64,
        dump: Option<PathBuf>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>, context: &'static str) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
            context,
        }
    }
}
