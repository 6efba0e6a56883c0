use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the modeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("zero parseable lines in {0}")]
    NoParseableLines(PathBuf),

    #[error("{malformed} of {total} lines malformed, above tolerance {tolerance}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        tolerance: f64,
    },

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing feature column `{0}`")]
    MissingFeature(String),

    #[error("all feature columns have zero variance")]
    AllColumnsConstant,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no user with at least two sessions")]
    NoRepeatUsers,

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("objective increased from {previous} to {current} at iteration {iteration}")]
    ObjectiveIncrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("all grid fits failed")]
    AllFitsFailed,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model file version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
