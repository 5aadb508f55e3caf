use std::path::PathBuf;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{axis} extent {extent} is not divisible by {factor}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        factor: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("could not place {objects} objects without overlap after {attempts} attempts")]
    Placement { objects: usize, attempts: usize },
    #[error("unknown channel group `{0}`")]
    UnknownGroup(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
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

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
