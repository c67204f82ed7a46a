use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("matrix construction failed after {attempts} attempts")]
    ConstructionFailed { attempts: usize },

    #[error("sinkhorn scaling did not converge after {iterations} iterations (row-sum deviation {deviation:e})")]
    ScalingFailed { iterations: usize, deviation: f64 },

    #[error("invalid density {density} for n={n}: {reason}")]
    InvalidDensity { density: f64, n: usize, reason: String },

    #[error("mixing matrix rejected: {0}")]
    Topology(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("idx: wrong magic 0x{found:08x} at offset 0, expected 0x{expected:08x}")]
    IdxBadMagic { expected: u32, found: u32 },

    #[error("idx: truncated {what} at offset {offset}: need {needed} bytes, have {available}")]
    IdxTruncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("idx: image count {images} does not match label count {labels} (count field at offset 4)")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("not enough samples: {0}")]
    TooFewSamples(String),

    #[error("divergence at round {round}: non-finite loss")]
    Divergence { round: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
