use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical divergence in {location}")]
    Divergence { location: String },

    #[error("divergence during {phase}; last good checkpoint: {checkpoint}")]
    PhaseDivergence { phase: String, checkpoint: String },

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("growth error: {0}")]
    Growth(String),

    #[error("controller state error: {0}")]
    Controller(String),

    #[error("config error at line {line}: key `{key}`: {msg}")]
    Config { key: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt file {path}: {msg} (offset {offset})")]
    Corrupt { path: PathBuf, offset: u64, msg: String },

    #[error("format error in {path}: expected magic {expected:?}")]
    Format { path: PathBuf, expected: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Missing(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class: 2 config, 3 divergence, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) => 2,
            Error::Divergence { .. } | Error::PhaseDivergence { .. } => 3,
            Error::Io { .. } | Error::Corrupt { .. } | Error::Format { .. } | Error::Missing(_) => 4,
            Error::Wiring(_) | Error::Growth(_) | Error::Controller(_) => 1,
        }
    }
}
