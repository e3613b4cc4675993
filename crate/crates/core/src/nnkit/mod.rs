//! A small neural-network kernel: dense and convolutional ops with
//! reverse-mode differentiation, parameter storage and Adam.
//!
//! ```
//! use sparseview::nnkit::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64(&[1, 2], &[1.0, -2.0])?)?;
//! let w = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0])?)?;
//! let y = g.matmul(x, w)?;
//! let loss = g.sum(y)?;
//! let grads = g.backward(loss)?;
//! assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
//! # Ok::<(), sparseview::Error>(())
//! ```

mod graph;
mod params;
mod tensor;

pub use graph::{softplus, Gradients, Graph, Var};
pub use params::{adam_step, glorot_uniform, AdamState, GradAccumulator, ParamStore};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
