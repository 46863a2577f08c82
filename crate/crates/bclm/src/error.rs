//! Crate-wide error type. Each variant maps to a stable machine-parseable
//! category that the CLI prints on failure.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    BadConfig(String),
    #[error("line {line}: {msg}")]
    MalformedCorpus { line: usize, msg: String },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("{0}")]
    BadCheckpoint(String),
    #[error("{0}")]
    HashMismatch(String),
    #[error("{0}")]
    MissingFile(String),
    #[error("{0}")]
    InsufficientData(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadConfig(_) => "bad_config",
            Error::MalformedCorpus { .. } => "malformed_corpus",
            Error::UnknownToken(_) => "unknown_token",
            Error::BadCheckpoint(_) => "bad_checkpoint",
            Error::HashMismatch(_) => "hash_mismatch",
            Error::MissingFile(_) => "missing_file",
            Error::InsufficientData(_) => "insufficient_data",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
