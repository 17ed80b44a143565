//! Dense tensors with tape-based reverse-mode differentiation.

mod element;
mod graph;
pub mod kernels;
mod param;
#[allow(clippy::module_inception)]
mod tensor;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use param::{BnUpdate, LrGroup, ParamStore, Parameter};
pub use tensor::Tensor;

/// Batchnorm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
