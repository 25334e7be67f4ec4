//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record for patient `{patient_id}`: {message}")]
    Validation { patient_id: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token id {id} at position {position} is outside table `{table}` of size {size}")]
    Lookup {
        table: &'static str,
        position: usize,
        id: usize,
        size: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("point {value} in dimension {dim} lies outside the inducing grid [{lower}, {upper}]")]
    Extrapolation {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence {
        epoch: usize,
        message: String,
        last_good: Box<crate::dbgp::ModelState>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
