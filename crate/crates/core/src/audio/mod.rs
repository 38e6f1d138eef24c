//! Waveform I/O, dataset manifests and the synthetic two-sensor corpus.

mod manifest;
mod synth;
mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{
    load_manifest, write_manifest, IrSet, ManifestEntry, NoiseEntry, NoiseKind, Split,
    UtteranceEntry,
};
pub use synth::{synth_corpus, synth_corpus_with, SynthOptions};
pub use wav::{read_wav, write_wav, WavFormat};

/// Every pipeline-internal buffer runs at this rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub rate: u32,
}

impl AudioBuffer {
    /// Wraps samples at the pipeline rate.
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.rate)
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.energy() / self.samples.len() as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| gain * x).collect(),
            rate: self.rate,
        }
    }

    /// First `len` samples (or all of them when shorter).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            rate: self.rate,
        }
    }

    /// `len` samples starting at `offset`, wrapping around the end of the
    /// buffer so that short buffers are padded cyclically.
    pub fn cyclic_clip(&self, offset: usize, len: usize) -> Self {
        let n = self.samples.len();
        let samples = if n == 0 {
            vec![0.0; len]
        } else {
            (0..len).map(|i| self.samples[(offset + i) % n]).collect()
        };
        Self {
            samples,
            rate: self.rate,
        }
    }
}

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("unsupported rate {rate} Hz in {path} (expected 16000)")]
    UnsupportedRate { path: PathBuf, rate: u32 },
    #[error("unsupported channel count {channels} in {path} (expected mono)")]
    UnsupportedChannels { path: PathBuf, channels: u16 },
    #[error("unsupported sample format {format} in {path} (expected pcm16 or float32)")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("refusing to write non-finite samples to {path}")]
    NonFinite { path: PathBuf },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("manifest line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("synthetic corpus needs at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("impulse response set {dir}: {msg}")]
    IrSet { dir: PathBuf, msg: String },
}
