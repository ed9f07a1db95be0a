//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape of primitives recorded in topological order by its
//! builder methods. Leaves are named and bound at evaluation time through a
//! [`TensorMap`]; [`evaluate`] computes every node value and [`backward`]
//! returns the gradient of a scalar node with respect to every leaf.
//!
//! ```
//! use diffcore::{backward, Graph, Tensor, TensorMap};
//!
//! let mut g = Graph::new();
//! let x = g.leaf("x");
//! let sq = g.mul(x, x);
//! let loss = g.sum(sq);
//!
//! let bindings: TensorMap = [("x", Tensor::scalar(3.0))].into_iter().collect();
//! let grads = backward(&g, &bindings, loss).unwrap();
//! assert_eq!(grads.get("x").unwrap().item(), 6.0);
//! ```

mod error;
mod eval;
mod gradcheck;
mod graph;
mod tensor;
mod tensor_map;

pub use error::DiffError;
pub use eval::{backward, backward_from_values, evaluate, rot6d_matrix, value_and_grad, ROT6D_MIN_NORM};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Graph, NodeId, Op, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub use tensor_map::TensorMap;

/// Gradients keyed by leaf name.
pub type GradientMap = TensorMap;
