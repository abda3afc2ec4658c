use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("{what} contains a non-finite value at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("requested k = {k} neighbors but the cloud has only {size} points")]
    TooFewPoints { k: usize, size: usize },

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("no rigid transform supplied for occupied part {part}")]
    MissingTransform { part: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid pose: {0}")]
    Pose(String),

    #[error("PLY parse error at line {line}: {message}")]
    PlyHeader { line: usize, message: String },

    #[error("PLY body error: {0}")]
    PlyBody(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Fails with [`Error::LengthMismatch`] unless `found == expected`.
pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what,
            expected,
            found,
        })
    }
}
