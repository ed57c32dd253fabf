//! A small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! The engine is deliberately narrow: dense row-major tensors, a dynamic tape
//! built as operations execute, and exactly the layers the tempo models need
//! (linear maps, 2D convolutions, normalization, attention). External crates
//! extend it with fused operations through [`Tensor::from_op`].

mod gemm;
pub mod layers;
pub mod ops;
pub mod optim;
mod param;
mod tensor;

pub use gemm::gemm;
pub use param::{join, Module, NamedParams, Param};
pub use tensor::{no_grad, grad_enabled, Gradients, NoGradGuard, Tensor};
