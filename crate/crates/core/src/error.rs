use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("rewrite error: {0}")]
    Rewrite(String),
    #[error("build error at layer {layer}: {message}")]
    Build { layer: usize, message: String },
    #[error("layer {index} (`{layer}`): {source}")]
    Layer {
        index: usize,
        layer: String,
        source: Box<Error>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
