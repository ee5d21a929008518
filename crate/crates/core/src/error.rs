use std::path::PathBuf;

use rfsep_dsp::DspError;
use rfsep_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown query {query:?}; vocabulary is [{}]", vocab.join(", "))]
    UnknownQuery { query: String, vocab: Vec<String> },
    #[error("query is empty after normalization: {0:?}")]
    EmptyQuery(String),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownQuery { .. }
                | Error::EmptyQuery(_)
                | Error::Invalid(_)
                | Error::Dsp(DspError::UnsupportedFormat(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
