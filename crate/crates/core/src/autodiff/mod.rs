//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters and inputs enter
//! as leaves; any leaf recorded with [`Tape::param`] (or a tensor flagged with
//! `requires_grad`) receives a gradient from [`Tape::backward`]. Inputs are
//! ordinary leaves, so input gradients come out of the same sweep.

mod special;
mod tape;
mod tensor;

pub use special::{digamma, lgamma, trigamma};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_softmax_rows, softmax_rows};

use crate::error::{Error, Result};

/// `softmax(logits / tau)` on a single logit vector or on each row of a matrix.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain("softmax_temp", format!("temperature must be > 0, got {tau}")));
    }
    let cols = *logits.shape().last().expect("non-empty shape");
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), cols, tau))
}
