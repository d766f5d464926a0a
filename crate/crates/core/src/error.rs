use thiserror::Error;

/// Crate-wide error type. The CLI maps `Io`/`Image` to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// An operation was called in the wrong order (e.g. step before backward).
    #[error("state error: {0}")]
    State(String),
    /// Checkpoint/config does not match what the operation expects.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
