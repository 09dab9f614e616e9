//! Dense feed-forward networks with hand-written backpropagation.

mod checkpoint;
mod matrix;
mod network;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::DenseMatrix;
pub use network::{
    backward, forward, init_network, predict_class, ForwardCache, Head, Linear, NetworkParams, NetworkSpec,
    StageParams, Topology, DEFAULT_HIDDEN,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
