//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only tape: leaves are registered with
//! [`Graph::param`] (trainable) or [`Graph::constant`], every op appends one node,
//! and [`Graph::backward`] walks the tape in reverse from a scalar node.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
