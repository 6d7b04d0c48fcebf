use std::path::PathBuf;

use thiserror::Error;

use crate::numkit::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("enumeration over {positions} mask positions exceeds the bound of {bound}")]
    TooLarge { positions: usize, bound: usize },
    #[error("non-finite loss {value} at epoch {epoch}, step {step} (batch {batch})")]
    NonFinite {
        value: f64,
        epoch: usize,
        step: usize,
        batch: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
