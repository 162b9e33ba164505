//! Minimal dense-tensor core with reverse-mode differentiation.
//!
//! All values are `f64`. Broadcasting in binary ops is limited to two cases:
//! a single-element right-hand side, or a right-hand side whose shape equals
//! the trailing axes of the left-hand side (e.g. a bias row added to every row
//! of a matrix). Anything else is a shape error.

#![allow(clippy::needless_range_loop)]

pub mod check;
mod error;
mod graph;
mod tensor;

pub use check::{finite_diff_check, grad_check, Coords, DEFAULT_EPS};
pub use error::{Result, TensorError};
pub use graph::{gelu, sigmoid, softplus, CustomOp, Graph, Var, PAD};
pub use tensor::Tensor;
