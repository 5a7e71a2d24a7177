use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("not enough eligible identities: requested {requested}, {eligible} have at least {min_samples} samples")]
    NotEnoughIdentities {
        requested: usize,
        eligible: usize,
        min_samples: usize,
    },

    #[error("identity {identity:?} has {samples} sample(s); a known identity needs at least one train and one test sample")]
    IdentityTooSmall { identity: String, samples: usize },

    #[error("pair generation needs at least 2 known identities, got {0}")]
    TooFewIdentities(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("model file: {0}")]
    CorruptModel(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("protocol point {point}, trial {trial}: {source}")]
    Trial {
        point: usize,
        trial: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
