use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel at level 0 has no parent")]
    NoParent,

    #[error("window parameter {window} out of range for level {level} (need 1 <= w <= n)")]
    WindowOutOfRange { level: u8, window: u8 },

    #[error("shifted window construction is not a partition: {0}")]
    PartitionViolated(String),

    #[error("level must be >= 1 for {0}")]
    LevelTooLow(&'static str),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (bound {bound}) in {context}")]
    IndexOutOfRange {
        index: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("attention mask excludes every member of window {0}")]
    EmptyWindow(usize),

    #[error("channel manifest mismatch: {0}")]
    Manifest(String),

    #[error("channel `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset too short: need {needed} consecutive states, have {available}")]
    DatasetTooShort { needed: usize, available: usize },

    #[error("anomaly norm is zero at time index {0}")]
    ZeroAnomaly(usize),

    #[error("no latitude rows with 30 < |lat| < 60 on a grid with {0} rows")]
    EmptyBand(usize),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing parameter `{0}` in checkpoint")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
