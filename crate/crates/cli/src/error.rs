use std::path::PathBuf;

use thiserror::Error;

/// A malformed input file. `offset` is the byte where parsing failed.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("byte {offset}: {msg}")]
pub struct ParseError {
    pub offset: usize,
    pub msg: String,
}

impl ParseError {
    pub fn new(offset: usize, msg: impl Into<String>) -> Self {
        ParseError {
            offset,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("every input failed: {0}")]
    AllFailed(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Core(#[from] vpcnet::error::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for empty input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::EmptyInput(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
