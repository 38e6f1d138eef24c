use thiserror::Error;

use crate::audio::AudioError;
use crate::autodiff::ShapeError;
use crate::dsp::DspError;
use crate::metrics::MetricError;
use crate::mixsim::MixError;
use crate::model::{CheckpointError, ModelError};
use crate::train::TrainError;

/// Crate-wide error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by numerics (divergence, non-finite values)
    /// rather than by bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Train(TrainError::Divergence { .. }) | Error::Dsp(DspError::NonFinite)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
