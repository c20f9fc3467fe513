//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! execution order; [`Graph::backward`] sweeps them once in reverse and
//! accumulates gradients additively across fan-out.
//!
//! ```
//! use amn_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Scalar sigmoid, shared with code that works outside the tape.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Scalar `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    kernels::softplus(x)
}
