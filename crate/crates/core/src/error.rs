use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),

    #[error("string {tokens:?} is not a member of the language")]
    NotMember { tokens: Vec<u32> },

    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("language too large to enumerate: {size} strings exceeds cap {cap}")]
    TooLarge { size: u128, cap: u128 },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            Error::Io { .. } | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
