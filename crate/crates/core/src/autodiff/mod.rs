//! Reverse-mode differentiation engine.
//!
//! One graph belongs to one worker; distinct graphs over shared read-only
//! parameter values may run concurrently. A graph is consumed by its
//! backward pass — rebuilding is the only way to differentiate again.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{BackwardResult, Graph, NodeId, TapSpec};
pub use tensor::Tensor;
