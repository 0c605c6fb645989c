use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("utterance `{utterance}`: {msg}")]
    Bundle { utterance: String, msg: String },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (domain `{domain}`): L_CE={ce}, L_aux={aux}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        domain: String,
        ce: f64,
        aux: f64,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
