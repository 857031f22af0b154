use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which chain invariant an append or import tripped over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrityCheck {
    Genesis,
    PrevHash,
    Height,
    SelfHash,
}

impl std::fmt::Display for IntegrityCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            IntegrityCheck::Genesis => "genesis",
            IntegrityCheck::PrevHash => "prev-hash",
            IntegrityCheck::Height => "height",
            IntegrityCheck::SelfHash => "self-hash",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("chain integrity violated ({check}): {detail}")]
    ChainIntegrity { check: IntegrityCheck, detail: String },

    #[error("leader election failed: no eligible candidate")]
    ElectionFailed,

    #[error("ingestion error at byte offset {offset}: {reason}")]
    Ingestion { offset: u64, reason: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
