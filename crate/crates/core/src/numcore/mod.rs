//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything runs in `f64`; the tape records each primitive together with the
//! intermediates its backward rule needs. Parameters enter the tape through
//! [`Tape::leaf`], and [`Gradients::accumulate_into`] moves the resulting
//! gradients back into their [`Tensor`]s.

pub mod gemm;
pub mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
