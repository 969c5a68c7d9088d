use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate ensemble: {members} member(s), at least 2 required")]
    DegenerateEnsemble { members: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("model failure: {0}")]
    ModelFailure(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics parse error at line {line}: {message}")]
    Metrics { line: usize, message: String },

    #[error("connection failure: {0}")]
    Connection(String),

    #[error("restart budget exhausted: {0}")]
    RestartBudget(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
