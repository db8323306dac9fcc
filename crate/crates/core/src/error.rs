use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("einsum parse error in {spec:?}: {reason}")]
    Parse { spec: String, reason: String },

    #[error("degenerate mask: every position of slice {slice} along the softmax axis is masked")]
    DegenerateMask { slice: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("undefined composition: {0}")]
    UndefinedComposition(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("label-space mismatch: {0}")]
    LabelSpace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
}
