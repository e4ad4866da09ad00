//! Reverse-mode automatic differentiation over f64 `ndarray` storage.
//!
//! The tensor graph is a DAG of reference-counted nodes; `Tensor::backward`
//! walks it in reverse topological order and accumulates gradients for every
//! node created with [`Tensor::var`]. Only the ops this workspace's models
//! need are implemented (elementwise, broadcasting binary, reductions,
//! matmul, 1-D/2-D convolutions, framing and resampling primitives), each
//! verified against central finite differences in the crate tests.

mod conv;
pub mod gradcheck;
pub mod optim;
mod ops;
mod tensor;

pub use tensor::{Grads, Tensor};
