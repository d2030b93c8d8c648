use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index:?} out of range for extent {extent:?}")]
    Index { index: [i64; 2], extent: [i64; 2] },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry invariant violated: {0}")]
    Geometry(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("instance too large for exhaustive path enumeration ({paths} paths, limit {limit})")]
    TooLarge { paths: u128, limit: u128 },
    #[error("evaluation mask is empty")]
    EmptyMask,
    #[error("image {width}x{height} is smaller than one {patch}x{patch} patch")]
    ImageTooSmall { width: usize, height: usize, patch: usize },
    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),
    #[error(transparent)]
    Pnm(#[from] crate::io::pnm::PnmError),
    #[error(transparent)]
    Flo(#[from] crate::io::flo::FloError),
    #[error(transparent)]
    Checkpoint(#[from] crate::training::checkpoint::CheckpointError),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
