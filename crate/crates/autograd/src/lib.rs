//! A small define-by-run autodiff engine: dense tensors, a tape of differentiable
//! ops (convolutions, normalisation, activations, classification losses), layers,
//! Adam, and a finite-difference gradient checker.
//!
//! Everything is single threaded and deterministic: identical inputs and seeds give
//! bitwise-identical values and gradients.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{sigmoid, softplus, CustomOp};
pub use optim::{Adam, AdamState};
pub use param::{Module, Param, ParamId};
pub use real::Real;
pub use tensor::Tensor;
