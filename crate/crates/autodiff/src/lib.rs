//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar result replays the record in reverse and
//! returns [`Gradients`] for every leaf that requires one.
//!
//! The graph is generic over its [`Element`] type. Training uses `f32`; the
//! `f64` instantiation runs the same kernels for finite-difference checks.

mod element;
mod error;
mod graph;
pub mod kernels;
mod tensor;

pub use element::Element;
pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
