use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MasqError>;

#[derive(Debug, Error)]
pub enum MasqError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite value at index {index} while constructing a matrix")]
    NonFinite { index: usize },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:e}")]
    NotSymmetric { max_asym: f64 },

    #[error(
        "Gram matrix is numerically rank deficient (smallest eigenvalue {min_eig:e}, \
         largest {max_eig:e}); pass a positive eps to regularize the whitening"
    )]
    RankDeficient { min_eig: f64, max_eig: f64 },

    #[error("rank {rank} exceeds the maximum {max} for a {rows}x{cols} matrix")]
    RankTooLarge {
        rank: usize,
        max: usize,
        rows: usize,
        cols: usize,
    },

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("modality `{0}` has no calibration batches")]
    EmptyModality(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("tensor payload length mismatch in {path}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl MasqError {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        MasqError::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        MasqError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
