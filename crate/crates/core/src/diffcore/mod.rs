//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its value and a backward rule; [`Graph::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order.

mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use ops::{bilinear_backward, bilinear_sample_into};
pub use optim::{AdamState, AdamW};
pub use params::{fan_in_uniform, Attach, Bound, ParamId, ParamSink, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
