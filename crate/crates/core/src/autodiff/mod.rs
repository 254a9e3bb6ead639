//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Trainable tensors live
//! in a [`ParamStore`] and are bound into the graph on first use; after
//! [`Graph::backward`] the returned [`Gradients`] feed an [`AdamW`] step.
//!
//! ```
//! use panoseg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.var(x).unwrap(), &[6.0]);
//! ```

mod backward;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::{IGNORE_LABEL, LAYER_NORM_EPS};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
