//! Dense tensors, a reverse-mode tape, and the layers the policy is built from.

mod graph;
mod params;
mod tensor;

pub mod gradcheck;
pub mod layers;

pub use graph::{Graph, Var};
pub use params::{Gradients, NamedTensor, ParamCheckpoint, ParamId, ParamStore, PARAM_FORMAT, PARAM_FORMAT_VERSION};
pub use tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        ShapeError(msg.into())
    }
}

#[cfg(test)]
mod tests;
