use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input {height}x{width} is not divisible by the backbone stride {stride}")]
    NotDivisible { height: usize, width: usize, stride: usize },

    #[error("index {index} out of range (valid: {valid})")]
    IndexOutOfRange { index: usize, valid: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample {0} has no label")]
    MissingLabel(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by bad user input (configs, arguments, files)
    /// as opposed to internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::Shape(_) | Error::IndexOutOfRange { .. })
    }
}
