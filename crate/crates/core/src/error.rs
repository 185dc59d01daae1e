use thiserror::Error;
use tsa_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights file: {0}")]
    Format(String),
    #[error("idx file: {0}")]
    Idx(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("illegal adapter at {site}: {reason}")]
    IllegalAdapter { site: String, reason: String },
    #[error("dataset {dataset}: {reason}")]
    Dataset { dataset: String, reason: String },
    #[error("episode sampling: {0}")]
    Sampling(String),
    #[error("adaptation diverged at iteration {iteration}: loss {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("{failed} of {total} episodes failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Report(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Report(e.to_string())
    }
}
