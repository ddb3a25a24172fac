use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("enumeration over {units} units exceeds the cap of {cap}")]
    EnumerationCap { units: usize, cap: usize },

    #[error("dense metric with {n} parameters exceeds the cap of {cap}")]
    DenseCap { n: usize, cap: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training aborted at epoch {epoch}, update {update}: {reason}")]
    TrainingAborted {
        epoch: usize,
        update: usize,
        reason: String,
        /// Last model whose parameters were all finite.
        last_finite: Box<crate::model::DbmModel>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
