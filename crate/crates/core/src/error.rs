use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (dimension {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("duplicate entry for (user {user}, event {event}): {first} vs {second}")]
    DuplicateEntry {
        user: usize,
        event: usize,
        first: f64,
        second: f64,
    },

    #[error("invalid rating value {value} for (user {user}, event {event})")]
    InvalidValue { user: usize, event: usize, value: f64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input")]
    EmptyInput,

    #[error("empty matrix: no observations to work with")]
    EmptyMatrix,

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite update at epoch {epoch}, step {step} (user {user}, event {event})")]
    NonFiniteUpdate {
        epoch: usize,
        step: usize,
        user: usize,
        event: usize,
    },

    #[error("invalid payload: {0}")]
    InvalidPayload(String),

    #[error("signing failure: {0}")]
    SigningFailure(String),

    #[error("user {0} is not registered")]
    UnregisteredUser(usize),

    #[error("profile verification failed: {0}")]
    VerificationFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
