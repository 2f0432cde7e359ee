//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value. Differentiable computations are recorded on a
//! [`Graph`] through [`Var`] handles and differentiated with
//! [`Graph::backward`].

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod kernels;
mod rng;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_with, Coords, GradCheckReport, Stencil};
pub use graph::{attention, attention_weights, Gradients, Graph, NodeId, Var};
pub use rng::Rng;
pub use tensor::Tensor;
