//! A small reverse-mode automatic differentiation tape.
//!
//! Values live on a [`Tape`]; every operation appends a node recording its
//! inputs, and [`Tape::backward`] walks the tape in reverse to accumulate
//! exact gradients. Recurrent and convolutional layers are fused kernels with
//! hand-written backward passes so that long sequences stay cheap in memory.
//!
//! The tape is generic over [`Scalar`]: `f64` for gradient checks, `f32`
//! for training runs.

mod conv;
mod lstm;
mod optim;
mod scalar;
mod tape;

use thiserror::Error;

pub use lstm::{lstm_cell, LstmParams};
pub use optim::{clip_grad_norm, AdamState, Param, ParamSet};
pub use scalar::{gemm, Scalar};
pub use tape::{CustomOp, Gradients, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub lhs: Vec<usize>,
    pub rhs: Vec<usize>,
}

impl ShapeError {
    pub(crate) fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
