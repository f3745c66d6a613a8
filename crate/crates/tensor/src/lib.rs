//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! A [`Graph`] records primitive applications as they are evaluated.
//! Leaves are either parameters (which receive gradients) or constants.
//! [`Graph::backward`] walks the record in reverse from a scalar loss.
//!
//! ```
//! use crac_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, RELATIVE_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Softmax over axis 1 of a raw `[outer, channels, inner]` buffer.
pub fn softmax_channels(x: &[f64], outer: usize, channels: usize, inner: usize) -> Vec<f64> {
    graph::softmax_channels(x, (outer, channels, inner))
}
