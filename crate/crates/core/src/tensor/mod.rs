//! Dense matrices and the autodiff graph used by every trainable component.

mod graph;
mod mat;

pub use graph::{gelu, Gradients, Graph, NodeId, Tracking};
pub use mat::Mat;
