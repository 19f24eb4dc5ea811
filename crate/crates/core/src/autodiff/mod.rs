//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is an eager tape: every operation computes its value
//! immediately and records a backward closure on the owning [`Graph`].
//! Node insertion order is a topological order, so [`Graph::backward`]
//! is a single reverse sweep. All tensors are `ndarray::ArrayD<f64>`;
//! feature maps use `(C, H, W)` layout and flow/coordinate fields use
//! `(2, H, W)` with channel 0 = x and channel 1 = y.

mod graph;
mod gradcheck;
mod ops;

pub mod nn;

pub use gradcheck::{finite_diff_check, max_rel_err, GradCheckReport};
pub use graph::{Arr, Gradients, Graph, Var};
pub use ops::identity_grid;
