//! Minimal reverse-mode differentiation over dense row-major arrays.

mod conv;
mod graph;
mod ops;
mod tensor;

pub use conv::{BatchMoments, ConvGeometry};
pub use graph::{Backward, Gradients, Graph, Leaf, NodeId, RunningUpdate};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests;
