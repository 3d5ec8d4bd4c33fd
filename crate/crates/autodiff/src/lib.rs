//! Dense `f64` tensors with a tape-based reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; every operation appends a node recording its
//! inputs and whatever activations the backward pass needs. [`Tape::backward`]
//! walks the nodes in strict reverse creation order and leaves a gradient on
//! every node that requires one. Tapes never share state, so building a fresh
//! tape per training step gives isolated gradients.

mod adam;
mod conv;
mod error;
pub mod gradcheck;
pub mod opsuite;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeom;
pub use error::{AutodiffError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Denominator guard used by normalization and cosine similarity.
pub const EPS_NORM: f64 = 1e-12;
