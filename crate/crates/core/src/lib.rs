//! Own-voice speech enhancement for hearables with an outer microphone and an
//! in-ear microphone.
//!
//! The crate covers the full experiment pipeline:
//!
//! * [`audio`]: WAV I/O, JSON-lines manifests and a synthetic two-sensor corpus.
//! * [`dsp`]: square-root-Hann STFT/ISTFT, normalization statistics, convolution.
//! * [`mixsim`]: the additive two-sensor signal model, training configurations
//!   A-D, noise spatialization, enrollment sampling and evaluation mixtures.
//! * [`autodiff`]: a small reverse-mode tape with LSTM and convolution kernels,
//!   ADAM and global-norm gradient clipping.
//! * [`model`]: the FT-JNF mask estimator, its speaker encoder, parameter
//!   counting and the checkpoint container.
//! * [`train`]: combined time/magnitude L1 loss, learning-rate schedule, the
//!   training loop and single-utterance enhancement.
//! * [`metrics`]: SI-SDR, ESTOI, test-set evaluation and the noisy-enrollment sweep.

pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod metrics;
pub mod mixsim;
pub mod model;
pub mod rng;
pub mod train;

mod error;

pub use audio::{AudioBuffer, SAMPLE_RATE};
pub use error::{Error, Result};
pub use mixsim::{ConfigId, MixConfig, MixtureExample, Sensor, TwoSensor};
pub use model::{Arch, FtjnfConfig, ModelCheckpoint, SpeakerEncoderConfig};
pub use train::TrainConfig;
