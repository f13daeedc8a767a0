use std::io;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum IaplError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training error in tensor `{tensor}`: {msg}")]
    Training { tensor: String, msg: String },
    #[error("test-time tuning failed for sample {sample}: {msg}")]
    Tta { sample: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, IaplError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IaplError::Argument(msg.into()))
}
