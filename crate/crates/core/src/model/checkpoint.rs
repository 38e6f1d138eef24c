//! Versioned binary checkpoint container.
//!
//! Layout: the magic bytes `PASSE`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian `f32` payload. The header holds the model configuration,
//! training metadata, normalization statistics and a table of parameter
//! names, shapes and element offsets into the payload. LSTM gate blocks are
//! stored in (input, forget, cell, output) order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FtjnfConfig, Model};
use crate::autodiff::{ParamSet, Scalar, Tensor};
use crate::dsp::NormStats;

pub const MAGIC: &[u8; 5] = b"PASSE";
pub const FORMAT_VERSION: u32 = 1;
const GATE_ORDER: &str = "i,f,g,o";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("structural error: {0}")]
    Structural(String),
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub seed: u64,
    pub mix_config: Option<String>,
    pub enroll_sensor: Option<String>,
    /// Weight of the magnitude term in the training loss.
    pub loss_lambda: f64,
}

/// Everything needed to run inference: configuration, normalization
/// statistics and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: FtjnfConfig,
    pub norm: NormStats,
    pub params: ParamSet<f32>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FtjnfConfig,
    metadata: TrainingMetadata,
    norm: NormStats,
    gate_order: String,
    payload_len: usize,
    params: Vec<ParamEntry>,
}

impl ModelCheckpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, norm: NormStats, metadata: TrainingMetadata) -> Self {
        Self {
            config: model.config,
            norm,
            params: model.params.cast(),
            metadata,
        }
    }

    pub fn model<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .params
            .params
            .iter()
            .map(|p| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape.clone(),
                    offset,
                };
                offset += p.value.numel();
                e
            })
            .collect();
        let header = Header {
            config: self.config,
            metadata: self.metadata.clone(),
            norm: self.norm.clone(),
            gate_order: GATE_ORDER.into(),
            payload_len: offset,
            params,
        };
        let json = serde_json::to_vec(&header).expect("header is always serializable");
        let mut out = Vec::with_capacity(17 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.params {
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 12 {
            return Err(CheckpointError::Structural("file ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes")) as usize;
        let rest = &rest[12..];
        if rest.len() < hlen {
            return Err(CheckpointError::Structural(format!(
                "header declares {hlen} bytes but only {} remain",
                rest.len()
            )));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| CheckpointError::Structural(format!("header: {e}")))?;
        if header.gate_order != GATE_ORDER {
            return Err(CheckpointError::Structural(format!(
                "unsupported gate order `{}`",
                header.gate_order
            )));
        }
        let payload = &rest[hlen..];

        let mut expected_offset = 0;
        for e in &header.params {
            if e.offset != expected_offset {
                return Err(CheckpointError::Structural(format!(
                    "parameter `{}` at offset {} (expected {expected_offset})",
                    e.name, e.offset
                )));
            }
            expected_offset += e.shape.iter().product::<usize>();
        }
        if expected_offset != header.payload_len {
            return Err(CheckpointError::Structural(format!(
                "parameter shapes cover {expected_offset} values but the payload holds {}",
                header.payload_len
            )));
        }
        let need = 4 * header.payload_len;
        if payload.len() < need {
            return Err(CheckpointError::TruncatedPayload {
                expected: need,
                found: payload.len(),
            });
        }
        if payload.len() > need {
            return Err(CheckpointError::Structural(format!(
                "{} trailing bytes after the payload",
                payload.len() - need
            )));
        }

        let mut params = ParamSet::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let data = payload[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Structural(err.to_string()))?;
            params.push(e.name, t);
        }
        let ckpt = Self {
            config: header.config,
            norm: header.norm,
            params,
            metadata: header.metadata,
        };
        ckpt.model::<f32>()
            .check_layout()
            .map_err(|e| CheckpointError::Structural(e.to_string()))?;
        if ckpt.norm.channels() != ckpt.config.channels || ckpt.norm.bins() != ckpt.config.bins {
            return Err(CheckpointError::Structural(
                "normalization statistics do not match the model configuration".into(),
            ));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelCheckpoint::from_bytes(&bytes)
}
