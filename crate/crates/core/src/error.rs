//! Crate-wide composite error for paths that cross module boundaries
//! (training engines, parallel prediction, the CLI).

use thiserror::Error;

use crate::collectives::CollectiveError;
use crate::data::DataError;
use crate::losses::LossError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric abort at epoch {epoch}, batch {batch}: {detail}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("worker rank {rank} panicked")]
    WorkerPanic { rank: usize },
    #[error("worker rank {rank} failed with exit code {code}")]
    WorkerFailed { rank: usize, code: i32 },
    #[error("parameter desync: {0}")]
    Desync(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    pub fn config(msg: impl Into<String>) -> Self {
        EngineError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 2 config error,
    /// 3 desync/transport error, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) => 2,
            EngineError::Collective(_)
            | EngineError::Desync(_)
            | EngineError::WorkerPanic { .. }
            | EngineError::WorkerFailed { .. } => 3,
            EngineError::NumericAbort { .. } => 4,
            _ => 1,
        }
    }
}
