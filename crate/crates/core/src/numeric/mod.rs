//! Minimal differentiable dense-array substrate.
//!
//! [`Tensor`] is an immutable row-major array; [`Graph`] records operations on
//! tensors eagerly and runs reverse-mode differentiation from a scalar loss.
//! Training runs in `f32`; gradient checks and oracles use `f64`.

mod conv;
pub mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use conv::{conv_out_extent, ConvGeom};
pub use gradcheck::{GradCheck, GradCheckReport, ScalarFn};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Stabilizer added to row norms by [`Graph::l2_normalize`] callers.
pub const NORM_EPS: f64 = 1e-8;
