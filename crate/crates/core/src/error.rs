use thiserror::Error;

use crate::ccnet::CalibHead;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("instance has no visible keypoints")]
    NotEvaluable,

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The input admits no well-defined answer (all-zero heatmap, zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed input file; `location` is `path:line:column` or `path: record id`.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("tolerance check failed: {0}")]
    Tolerance(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<CalibHead>,
    },
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            got,
        })
    }
}
