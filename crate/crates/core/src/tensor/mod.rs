//! Dense row-major tensors and a tape-recorded reverse-mode autodiff graph.
//!
//! Values live in a [`Graph`] for the duration of one forward/backward pass.
//! Every differentiable operation appends a node whose inputs precede it, so
//! the node vector is already in topological order and the backward pass is a
//! single reverse sweep. Only scalar broadcasting is supported; every other
//! shape disagreement is an error.

mod gemm;
mod graph;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{BinaryOp, Graph, Rhs, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
