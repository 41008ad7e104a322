use std::path::PathBuf;

use ami_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmiError>;

#[derive(Debug, Error)]
pub enum AmiError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("modality `{modality}`: window of {samples} samples is not divisible by patch size {patch}")]
    PatchPartition {
        modality: String,
        samples: usize,
        patch: usize,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("loss term `{part}` is not finite ({value})")]
    NonFiniteLoss { part: &'static str, value: f64 },

    #[error("training aborted after {0} consecutive non-finite gradient steps")]
    DivergedGradients(usize),

    #[error("{0}")]
    Invalid(String),

    #[error("i/o on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AmiError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
