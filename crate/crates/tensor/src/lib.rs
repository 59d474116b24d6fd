//! Dense tensors with tape-based reverse-mode differentiation, AdamW, and a
//! binary checkpoint format. Everything is generic over [`Scalar`] (`f32` or
//! `f64`).

mod checkpoint;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, read_header, write_checkpoint, CheckpointHeader, ParamEntry, MAGIC};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{lr_multiplier, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::{numel, ParamId, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutProbability(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type AdamW32 = AdamW<f32>;
