//! STFT analysis/synthesis, normalization statistics and linear convolution.

mod conv;
mod norm;
mod stft;

use thiserror::Error;

pub use conv::{convolve, convolve_direct};
pub use norm::{apply_norm, compute_norm_stats, invert_norm, MagTensor, NormAccumulator, NormStats};
pub use stft::{istft, stft, Spectrogram, Stft, StftConfig};

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one frame ({frame_len})")]
    TooShort { len: usize, frame_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("impulse response is empty")]
    EmptyKernel,
    #[error("no input to compute statistics from")]
    EmptyInput,
    #[error("non-finite values encountered")]
    NonFinite,
    #[error("invalid STFT configuration: {0}")]
    Config(String),
}
