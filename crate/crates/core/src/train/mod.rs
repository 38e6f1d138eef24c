//! Training: combined loss, learning-rate schedule, the epoch loop with
//! on-the-fly mixing, validation-based model selection and inference.

mod enhance;
mod loss;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, Split};
use crate::autodiff::{clip_grad_norm, AdamState, Tape};
use crate::dsp::{compute_norm_stats, NormStats, Stft};
use crate::mixsim::{
    draw_training_example, sample_enrollment, ConfigId, Corpus, EnrollmentRequest, MixConfig, Sensor,
};
use crate::model::{
    save_checkpoint, Arch, FtjnfConfig, Model, ModelCheckpoint, ModelVars, TrainingMetadata,
};
use crate::rng::rng_for;

pub use enhance::{enhance, CheckpointEnhancer};
pub use loss::{
    example_loss, features, loss_combined, masked_istft, stft_config_for, stft_magnitude,
    PreparedExample,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error("corpus has no {0:?} utterances")]
    NoData(Split),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Published layer sizes.
    Full,
    /// Hidden sizes 64/32 and a small speaker encoder.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_len_s: f64,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub max_grad_norm: f64,
    pub arch: Arch,
    pub mix_config: ConfigId,
    pub enroll_sensor: Sensor,
    pub seed: u64,
    pub model_size: ModelSize,
    /// Weight of the magnitude term.
    pub loss_lambda: f64,
    /// Caps the number of optimizer steps per epoch; an epoch otherwise
    /// visits every training utterance once.
    pub steps_per_epoch: Option<usize>,
    /// Pre-mixed validation examples per validation utterance.
    pub val_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            clip_len_s: 3.0,
            epochs: 50,
            lr0: 0.001,
            lr_halving_period: 5,
            max_grad_norm: 10.0,
            arch: Arch::PasSe,
            mix_config: ConfigId::D,
            enroll_sensor: Sensor::InEar,
            seed: 0,
            model_size: ModelSize::Full,
            loss_lambda: 1.0,
            steps_per_epoch: None,
            val_repeats: 1,
        }
    }
}

impl TrainConfig {
    /// Collects every invalid field into one error.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if !(self.clip_len_s > 0.0 && self.clip_len_s.is_finite()) {
            bad.push(format!("clip_len_s = {} must be positive", self.clip_len_s));
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            bad.push(format!("lr0 = {} must be positive", self.lr0));
        }
        if self.lr_halving_period == 0 {
            bad.push("lr_halving_period must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) {
            bad.push(format!("max_grad_norm = {} must be positive", self.max_grad_norm));
        }
        if !(self.loss_lambda >= 0.0 && self.loss_lambda.is_finite()) {
            bad.push(format!("loss_lambda = {} must be non-negative", self.loss_lambda));
        }
        if self.steps_per_epoch == Some(0) {
            bad.push("steps_per_epoch must be positive".into());
        }
        if self.val_repeats == 0 {
            bad.push("val_repeats must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }

    pub fn model_config(&self) -> FtjnfConfig {
        match self.model_size {
            ModelSize::Full => FtjnfConfig::for_arch(self.arch),
            ModelSize::Tiny => FtjnfConfig::tiny(self.arch),
        }
    }

    /// Mixing parameters with this run's configuration, clip length and seed.
    pub fn mix_for(&self, base: &MixConfig) -> MixConfig {
        MixConfig {
            config_id: self.mix_config,
            clip_len_s: self.clip_len_s,
            seed: self.seed,
            ..base.clone()
        }
    }
}

/// `lr0 · 0.5^floor(epoch / period)` for 0-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Lowest validation loss seen so far; ties keep the earliest epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `loss` is a new minimum.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => false,
            _ if loss.is_nan() => false,
            _ => {
                self.best = Some((epoch, loss));
                true
            }
        }
    }
}

/// Index of the minimum, earliest on ties.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    let mut t = BestTracker::default();
    for (e, &l) in losses.iter().enumerate() {
        t.update(e, l);
    }
    t.best.map(|(e, _)| e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,step,lr,train_loss,val_loss\n");
    for r in records {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.train_loss, r.val_loss).expect("string write");
    }
    s
}

pub fn step_log_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("epoch,step,lr,loss,grad_scale\n");
    for r in records {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.loss, r.grad_norm_scale).expect("string write");
    }
    s
}

const TAG_SHUFFLE: u64 = 1;
const TAG_MIX: u64 = 2;
const TAG_ENROLL: u64 = 3;
const TAG_VAL: u64 = 4;
const TAG_NORM: u64 = 5;

/// Everything fixed for the duration of a run.
struct Setup<'a> {
    corpus: &'a Corpus,
    cfg: &'a TrainConfig,
    mix: MixConfig,
    model_cfg: FtjnfConfig,
    stft: Arc<Stft>,
}

impl Setup<'_> {
    fn enroll_request(&self, split: Option<Split>) -> EnrollmentRequest {
        EnrollmentRequest {
            split,
            ..EnrollmentRequest::clean(self.cfg.enroll_sensor)
        }
    }

    /// Mixture (and enrollment) for utterance `utt` from a dedicated stream.
    fn draw(
        &self,
        utt: usize,
        stream: &[u64],
        enroll_split: Option<Split>,
        norm: &NormStats,
    ) -> crate::Result<PreparedExample> {
        let mut parts = stream.to_vec();
        parts.push(TAG_MIX);
        let mut rng = rng_for(self.cfg.seed, &parts);
        let ex = draw_training_example(self.corpus, utt, &self.mix, &mut rng)?;
        let enroll = if self.model_cfg.personalized() {
            *parts.last_mut().expect("non-empty") = TAG_ENROLL;
            let mut rng = rng_for(self.cfg.seed, &parts);
            let u = &self.corpus.utterances[utt];
            Some(sample_enrollment(self.corpus, &u.speaker, &u.id, self.enroll_request(enroll_split), &mut rng)?.utterance)
        } else {
            None
        };
        let y_i = (self.model_cfg.channels == 2).then_some(ex.y_i.samples.as_slice());
        Ok(PreparedExample::new(
            &self.stft,
            norm,
            &ex.y_o.samples,
            y_i,
            &ex.s_o.samples,
            enroll.as_ref().map(|e: &AudioBuffer| e.samples.as_slice()),
        )?)
    }

    /// Magnitude statistics of one seeded mixture per training utterance.
    fn norm_stats(&self, train: &[usize]) -> crate::Result<NormStats> {
        let mut sets = Vec::with_capacity(train.len());
        for (i, &u) in train.iter().enumerate() {
            let mut rng = rng_for(self.cfg.seed, &[TAG_NORM, i as u64]);
            let ex = draw_training_example(self.corpus, u, &self.mix, &mut rng)?;
            let mut chans = vec![ex.y_o];
            if self.model_cfg.channels == 2 {
                chans.push(ex.y_i);
            }
            sets.push(chans);
        }
        Ok(compute_norm_stats(sets, self.stft.config())?)
    }
}

fn loss_value(
    model: &Model<f32>,
    setup: &Setup<'_>,
    ex: &PreparedExample,
) -> crate::Result<f64> {
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::constants(model, &mut tape)?;
    let l = example_loss(&mut tape, &vars, &setup.model_cfg, &setup.stft, ex, setup.cfg.loss_lambda)?;
    Ok(f64::from(tape.value(l).data[0]))
}

/// Mean loss over `batch` and the mean gradient per parameter array.
fn batch_gradients(
    model: &Model<f32>,
    setup: &Setup<'_>,
    batch: &[PreparedExample],
) -> crate::Result<(f64, Vec<Vec<f32>>)> {
    let mut acc: Vec<Vec<f32>> = model
        .params
        .params
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f32;
    for ex in batch {
        let mut tape = Tape::<f32>::new();
        let vars = ModelVars::trainable(model, &mut tape)?;
        let l = example_loss(&mut tape, &vars, &setup.model_cfg, &setup.stft, ex, setup.cfg.loss_lambda)?;
        total += f64::from(tape.value(l).data[0]);
        let grads = tape.backward(l)?;
        for (a, &v) in acc.iter_mut().zip(&vars.all) {
            if let Some(g) = grads.get(v) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += w * y);
            }
        }
    }
    Ok((total / batch.len() as f64, acc))
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains a model on `corpus`, writing `model.ckpt` (best validation loss),
/// `train_log.csv` (per epoch) and `steps.csv` (per step) into `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    mix: &MixConfig,
    corpus: &Corpus,
    out_dir: impl AsRef<Path>,
) -> crate::Result<TrainOutcome> {
    train_with_hook(cfg, mix, corpus, out_dir, |_, l| l)
}

/// As [`train`], with `val_hook(epoch, loss)` able to replace each epoch's
/// validation loss before model selection sees it.
pub fn train_with_hook(
    cfg: &TrainConfig,
    mix: &MixConfig,
    corpus: &Corpus,
    out_dir: impl AsRef<Path>,
    mut val_hook: impl FnMut(usize, f64) -> f64,
) -> crate::Result<TrainOutcome> {
    cfg.validate()?;
    let mix = cfg.mix_for(mix);
    mix.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let setup = Setup {
        corpus,
        cfg,
        mix,
        model_cfg,
        stft: Arc::new(Stft::new(stft_config_for(model_cfg.bins))?),
    };
    let train_utts = corpus.split(Split::Train);
    if train_utts.is_empty() {
        return Err(TrainError::NoData(Split::Train).into());
    }
    let val_utts = corpus.split(Split::Val);
    if val_utts.is_empty() {
        return Err(TrainError::NoData(Split::Val).into());
    }

    let norm = setup.norm_stats(&train_utts)?;
    let mut val_set = Vec::new();
    for r in 0..cfg.val_repeats {
        for (i, &u) in val_utts.iter().enumerate() {
            val_set.push(setup.draw(u, &[TAG_VAL, r as u64, i as u64], None, &norm)?);
        }
    }

    let mut model = Model::<f32>::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&model.params, cfg.lr0);
    let mut best_params = model.params.clone();
    let mut tracker = BestTracker::default();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut step: u64 = 0;
    let natural_steps = train_utts.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(natural_steps);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        adam.lr = lr;
        let mut order = train_utts.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for s in 0..steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                let slot = s * cfg.batch_size + b;
                if cfg.steps_per_epoch.is_none() && slot >= order.len() {
                    break;
                }
                let u = order[slot % order.len()];
                batch.push(setup.draw(u, &[epoch as u64, slot as u64], Some(Split::Train), &norm)?);
            }
            let (loss, mut grads) = batch_gradients(&model, &setup, &batch)?;
            step += 1;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { epoch, step, loss }.into());
            }
            let scale = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.update(&mut model.params, &grads)?;
            epoch_loss += loss;
            steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss,
                grad_norm_scale: scale,
            });
        }
        let mut val = 0.0;
        for ex in &val_set {
            val += loss_value(&model, &setup, ex)?;
        }
        let val = val_hook(epoch, val / val_set.len() as f64);
        if !val.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                step,
                loss: val,
            }
            .into());
        }
        if tracker.update(epoch, val) {
            best_params = model.params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            step,
            lr,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss: val,
        });
        write_file(&out_dir.join("train_log.csv"), &epoch_log_csv(&epochs))?;
    }
    write_file(&out_dir.join("steps.csv"), &step_log_csv(&steps))?;

    let (best_epoch, best_val) = tracker.best.expect("at least one epoch");
    let best_step = epochs[best_epoch].step;
    let metadata = TrainingMetadata {
        epoch: best_epoch,
        step: best_step,
        val_loss: Some(best_val),
        seed: cfg.seed,
        mix_config: Some(cfg.mix_config.to_string()),
        enroll_sensor: model_cfg.personalized().then(|| cfg.enroll_sensor.to_string()),
        loss_lambda: cfg.loss_lambda,
    };
    let best = Model {
        config: model_cfg,
        params: best_params,
    };
    let checkpoint = ModelCheckpoint::from_model(&best, norm, metadata);
    save_checkpoint(&checkpoint, out_dir.join("model.ckpt"))?;
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(4, &cfg), 0.001);
        assert_eq!(lr_at(5, &cfg), 0.0005);
        assert_eq!(lr_at(49, &cfg), 0.001 * 0.5f64.powi(9));
        for e in 0..50 {
            assert_eq!(lr_at(e, &cfg), 0.001 / 2f64.powi((e / 5) as i32));
        }
    }

    #[test]
    fn best_epoch_is_earliest_minimum() {
        assert_eq!(select_best(&[3.0, 1.0, 2.0]), Some(1));
        assert_eq!(select_best(&[2.0, 1.0, 1.0]), Some(1));
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[f64::NAN, 5.0]), Some(1));
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = TrainConfig {
            batch_size: 0,
            lr0: -1.0,
            epochs: 0,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        for key in ["batch_size", "lr0", "epochs"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "arch": "as-se", "enroll_sensor": "OM"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.arch, Arch::AsSe);
        assert_eq!(cfg.enroll_sensor, Sensor::Outer);
        assert_eq!(cfg.batch_size, 8);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
