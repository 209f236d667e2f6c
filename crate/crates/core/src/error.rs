use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("no tape: backward called before forward")]
    NoTape,

    #[error("node {0} is not a scalar loss")]
    NotScalar(usize),

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("non-finite value produced at node {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("network has no convolution layer")]
    NoConvLayer,

    #[error("head pairing mismatch: {0}")]
    Pairing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(node: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            node,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
