//! Dense row-major tensors and a tape-based reverse-mode differentiation
//! engine with exactly the operator set the murmur classifier needs.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse
//! and accumulates gradients into every node that requires one.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::Conv2dGeometry;
pub use param::{ParamStore, Parameter};
pub use rng::StreamKey;
pub use scalar::Scalar;
pub use tensor::Tensor;
