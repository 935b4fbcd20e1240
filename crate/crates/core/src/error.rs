use std::path::PathBuf;

use thiserror::Error;

use crate::graph::GraphError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("path enumeration refused: more than {limit} paths (counted at least {estimate})")]
    PathLimit { estimate: u64, limit: u64 },
    #[error("negative sampling failed: {0}")]
    Sampling(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
