use crate::audio::AudioBuffer;
use crate::dsp::{NormStats, Stft};
use crate::metrics::Enhancer;
use crate::mixsim::{EvalAudio, Sensor};
use crate::model::{apply_mask, Model, ModelCheckpoint, ModelError};

use super::loss::{features, stft_config_for};

fn check_arity(
    model: &Model<f64>,
    y_i: Option<&AudioBuffer>,
    enroll: Option<&AudioBuffer>,
) -> Result<(), ModelError> {
    let arch = model.config.arch();
    match (model.config.channels, y_i) {
        (2, None) => {
            return Err(ModelError::Input(format!(
                "{arch} needs the in-ear signal as a second input"
            )))
        }
        (1, Some(_)) => {
            return Err(ModelError::Input(format!(
                "{arch} takes only the outer signal, but an in-ear signal was given"
            )))
        }
        _ => {}
    }
    match (model.config.personalized(), enroll) {
        (true, None) => Err(ModelError::MissingEmbedding),
        (false, Some(_)) => Err(ModelError::UnexpectedEmbedding),
        _ => Ok(()),
    }
}

fn run(
    model: &Model<f64>,
    norm: &NormStats,
    stft: &Stft,
    y_o: &AudioBuffer,
    y_i: Option<&AudioBuffer>,
    enroll: Option<&AudioBuffer>,
) -> crate::Result<AudioBuffer> {
    check_arity(model, y_i, enroll)?;
    let (spec, feats) = features(stft, norm, &y_o.samples, y_i.map(|b| b.samples.as_slice()))?;
    let emb = match enroll {
        Some(e) => Some(model.speaker_encode(e)?),
        None => None,
    };
    let mask = model.ftjnf_forward(&feats, emb.as_ref())?;
    let out = apply_mask(&mask, &spec)?;
    Ok(AudioBuffer::new(stft.inverse(&out)?))
}

/// Runs a checkpoint on one utterance. The output covers the samples spanned
/// by full STFT frames, `(frames - 1)·hop + frame_len`.
pub fn enhance(
    ckpt: &ModelCheckpoint,
    y_o: &AudioBuffer,
    y_i: Option<&AudioBuffer>,
    enroll: Option<&AudioBuffer>,
) -> crate::Result<AudioBuffer> {
    let stft = Stft::new(stft_config_for(ckpt.config.bins))?;
    run(&ckpt.model(), &ckpt.norm, &stft, y_o, y_i, enroll)
}

/// A checkpoint wrapped for evaluation. Outputs are zero-padded to the
/// mixture length so they line up with the reference.
#[derive(Debug)]
pub struct CheckpointEnhancer {
    pub name: String,
    pub ckpt: ModelCheckpoint,
    /// Enrollment sensor; defaults to the one used in training.
    pub enroll_sensor: Option<Sensor>,
    model: Model<f64>,
    stft: Stft,
}

impl CheckpointEnhancer {
    pub fn new(name: impl Into<String>, ckpt: ModelCheckpoint) -> crate::Result<Self> {
        let enroll_sensor = if ckpt.config.personalized() {
            Some(
                ckpt.metadata
                    .enroll_sensor
                    .as_deref()
                    .map(str::parse::<Sensor>)
                    .transpose()
                    .map_err(ModelError::Config)?
                    .unwrap_or(Sensor::Outer),
            )
        } else {
            None
        };
        Ok(Self {
            name: name.into(),
            model: ckpt.model(),
            stft: Stft::new(stft_config_for(ckpt.config.bins))?,
            enroll_sensor,
            ckpt,
        })
    }
}

impl Enhancer for CheckpointEnhancer {
    fn name(&self) -> &str {
        &self.name
    }

    fn enroll_sensor(&self) -> Option<Sensor> {
        self.enroll_sensor
    }

    fn train_config(&self) -> Option<String> {
        self.ckpt.metadata.mix_config.clone()
    }

    fn enhance(&self, item: &EvalAudio, enroll: Option<&AudioBuffer>) -> crate::Result<AudioBuffer> {
        let y_i = (self.model.config.channels == 2).then_some(&item.y.inear);
        let mut out = run(&self.model, &self.ckpt.norm, &self.stft, &item.y.outer, y_i, enroll)?;
        out.samples.resize(item.y.len(), 0.0);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, FtjnfConfig, TrainingMetadata};

    fn ckpt(arch: Arch, zero: bool) -> ModelCheckpoint {
        let cfg = FtjnfConfig {
            f_hidden: 8,
            t_hidden: 4,
            bins: 33,
            ..FtjnfConfig::tiny(arch)
        };
        let model = if zero {
            Model::<f32>::zeros(cfg).unwrap()
        } else {
            Model::<f32>::init(cfg, 1).unwrap()
        };
        ModelCheckpoint::from_model(&model, NormStats::identity(cfg.channels, 33), TrainingMetadata::default())
    }

    fn noise(n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect())
    }

    #[test]
    fn zero_weights_give_silence() {
        let c = ckpt(Arch::Se, true);
        let out = enhance(&c, &noise(1000), None, None).unwrap();
        assert_eq!(out.len(), (1000 - 64) / 32 * 32 + 64);
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn arity_errors() {
        let x = noise(1000);
        let as_se = ckpt(Arch::AsSe, false);
        assert!(enhance(&as_se, &x, None, None).is_err());
        assert!(enhance(&as_se, &x, Some(&x), None).is_ok());
        let se = ckpt(Arch::Se, false);
        assert!(enhance(&se, &x, Some(&x), None).is_err());
        assert!(enhance(&se, &x, None, Some(&x)).is_err());
        let pse = ckpt(Arch::Pse, false);
        assert!(enhance(&pse, &x, None, None).is_err());
        assert!(enhance(&pse, &x, None, Some(&x)).is_ok());
    }
}
