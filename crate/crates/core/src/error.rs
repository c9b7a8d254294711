use std::path::PathBuf;

use dplot_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("inconsistent architecture: {0}")]
    Arch(String),

    #[error("architecture mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Data(String),

    #[error("stream needs {needed} images but the pool holds {available}")]
    PoolExhausted { needed: usize, available: usize },

    #[error("selection: {0}")]
    Selection(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}
