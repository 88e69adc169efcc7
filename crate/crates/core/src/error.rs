use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("sequence with subtext lengths ({ell1}, {ell2}) needs length {needed} but L - 1 = {available}")]
    LengthOverflow {
        ell1: usize,
        ell2: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid length range: ell_min + 1 = {} exceeds ell_max = {ell_max}", .ell_min + 1)]
    InvalidRange { ell_min: usize, ell_max: usize },

    #[error("invalid length distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} {value} out of range 1..={max}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        max: usize,
    },

    #[error("invalid LP instance: U = {u} must be at least N_trg = {n_trg} >= 1")]
    InvalidLpInstance { u: usize, n_trg: usize },

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("unknown block name `{0}` (expected position, token, prev or all)")]
    UnknownBlock(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
