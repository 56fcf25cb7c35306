use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Recoverable failures surfaced through `Result`. Programmer errors
/// (shape mismatches inside the graph, invalid axes) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (epoch {epoch}); aborting")]
    NonFiniteLoss { step: usize, epoch: usize },

    #[error("non-finite gradient for parameter `{0}`; aborting")]
    NonFiniteGrad(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code contract: 1 for validation problems the user can fix
    /// (config, flags, malformed input files), 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest { .. } | Error::Data(_) => 1,
            _ => 2,
        }
    }
}
