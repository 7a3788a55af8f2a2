use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("probabilities cannot be normalized: {0}")]
    NonNormalizable(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("support mismatch at atom {atom}: p = {p}, q = 0")]
    SupportMismatch { atom: usize, p: f64 },

    #[error("group {0} has weight but no probability mass")]
    EmptyGroup(usize),

    #[error("invalid grouping scheme: {0}")]
    InvalidScheme(String),

    #[error("brute-force search supports at most {max} groups, got {got}")]
    TooManyGroups { max: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("AUC needs both classes present")]
    SingleClass,

    #[error("evaluation cell (a = {a}, s = {s}) has no samples")]
    MissingCell { a: u8, s: u8 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("grouping {0} uses the class label and cannot drive a model-based method")]
    YBasedGrouping(String),

    #[error("need at least {needed} schemes for correlation, got {got}")]
    InsufficientSchemes { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
