use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("duplicate object id `{0}`")]
    DuplicateId(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("need more than {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid tree edit: {0}")]
    Structure(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("operation cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn not_found(kind: &'static str, id: impl ToString) -> Self {
        Error::NotFound { kind, id: id.to_string() }
    }
}
