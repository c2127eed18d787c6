//! Reverse-mode automatic differentiation over batched matrices, fully
//! connected networks, the Adam optimizer and the model file container.

mod adam;
pub mod check;
mod container;
mod graph;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use container::{Container, ContainerError, FORMAT_VERSION, MAGIC};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use mlp::{BoundMlp, MlpArch, MlpParams};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}
