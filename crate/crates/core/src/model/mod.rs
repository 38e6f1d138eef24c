//! FT-JNF mask estimator, its speaker encoder branch, mask application,
//! parameter counting and the checkpoint container.
//!
//! The network reads normalized STFT magnitudes `[T, F, C]`. An F-LSTM scans
//! the frequency axis of every frame independently, its output is optionally
//! multiplied by a dense projection of a speaker embedding, a causal T-LSTM
//! scans time for every bin, and a linear layer followed by `tanh` yields a
//! real mask in (-1, 1) that multiplies the noisy outer-microphone STFT.

mod checkpoint;
mod graph;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::autodiff::{ParamSet, Scalar, ShapeError, Tape, Tensor};
use crate::dsp::{DspError, MagTensor, Spectrogram};
use crate::rng;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, ModelCheckpoint, TrainingMetadata,
    FORMAT_VERSION,
};
pub use graph::{ftjnf_mask, speaker_embedding, EncoderVars, ModelVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("personalized model needs an enrollment utterance or embedding")]
    MissingEmbedding,
    #[error("model is not personalized but an embedding was supplied")]
    UnexpectedEmbedding,
    #[error("enrollment of {len} samples is shorter than the filterbank kernel ({kernel})")]
    EnrollmentTooShort { len: usize, kernel: usize },
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// The four system variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Outer microphone only.
    Se,
    /// Outer microphone with enrollment conditioning.
    Pse,
    /// Outer and in-ear microphones.
    AsSe,
    /// Outer and in-ear microphones with enrollment conditioning.
    PasSe,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Se, Arch::Pse, Arch::AsSe, Arch::PasSe];

    pub fn channels(self) -> usize {
        match self {
            Arch::Se | Arch::Pse => 1,
            Arch::AsSe | Arch::PasSe => 2,
        }
    }

    pub fn personalized(self) -> bool {
        matches!(self, Arch::Pse | Arch::PasSe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Se => "se",
            Arch::Pse => "pse",
            Arch::AsSe => "as-se",
            Arch::PasSe => "pas-se",
        }
    }

    pub fn from_parts(channels: usize, personalized: bool) -> Option<Self> {
        match (channels, personalized) {
            (1, false) => Some(Arch::Se),
            (1, true) => Some(Arch::Pse),
            (2, false) => Some(Arch::AsSe),
            (2, true) => Some(Arch::PasSe),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown architecture `{s}` (expected se, pse, as-se or pas-se)"))
    }
}

/// Speaker encoder: learnable filterbank, 1x1 conv + PReLU, k=3 conv + PReLU,
/// 1x1 conv to the embedding size, temporal mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEncoderConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for SpeakerEncoderConfig {
    /// Full-size encoder. A hidden width of 661 brings the branch (including
    /// the conditioning dense layer) to 1,810,007 parameters.
    fn default() -> Self {
        Self {
            filters: 512,
            kernel: 16,
            stride: 8,
            hidden: 661,
            embed_dim: 128,
        }
    }
}

impl SpeakerEncoderConfig {
    /// Kernel of the middle convolution (no padding).
    pub const CONTEXT: usize = 3;

    /// Smallest enrollment length that yields at least one embedding frame.
    pub fn min_samples(&self) -> usize {
        self.kernel + (Self::CONTEXT - 1) * self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtjnfConfig {
    pub channels: usize,
    pub f_hidden: usize,
    pub t_hidden: usize,
    pub bins: usize,
    /// Present for personalized variants.
    pub speaker_encoder: Option<SpeakerEncoderConfig>,
}

impl FtjnfConfig {
    /// Full-size configuration of a variant.
    pub fn for_arch(arch: Arch) -> Self {
        Self {
            channels: arch.channels(),
            f_hidden: 512,
            t_hidden: 128,
            bins: 257,
            speaker_encoder: arch.personalized().then(SpeakerEncoderConfig::default),
        }
    }

    /// Desk-scale configuration used for quick experiments.
    pub fn tiny(arch: Arch) -> Self {
        Self {
            channels: arch.channels(),
            f_hidden: 64,
            t_hidden: 32,
            bins: 257,
            speaker_encoder: arch.personalized().then_some(SpeakerEncoderConfig {
                filters: 64,
                kernel: 16,
                stride: 8,
                hidden: 64,
                embed_dim: 32,
            }),
        }
    }

    pub fn arch(&self) -> Arch {
        Arch::from_parts(self.channels, self.personalized()).unwrap_or(Arch::Se)
    }

    pub fn personalized(&self) -> bool {
        self.speaker_encoder.is_some()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut bad = Vec::new();
        if !(1..=2).contains(&self.channels) {
            bad.push(format!("channels must be 1 or 2, got {}", self.channels));
        }
        for (name, v) in [
            ("f_hidden", self.f_hidden),
            ("t_hidden", self.t_hidden),
            ("bins", self.bins),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if let Some(s) = &self.speaker_encoder {
            for (name, v) in [
                ("filters", s.filters),
                ("kernel", s.kernel),
                ("stride", s.stride),
                ("hidden", s.hidden),
                ("embed_dim", s.embed_dim),
            ] {
                if v == 0 {
                    bad.push(format!("speaker_encoder.{name} must be positive"));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(bad.join("; ")))
        }
    }

    /// Name, shape and initialization range of every parameter array, in
    /// storage order.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let lstm = |out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hid: usize| {
            let r = 1.0 / (hid as f64).sqrt();
            out.push(ParamSpec::uniform(format!("{prefix}.w_ih"), &[4 * hid, input], r));
            out.push(ParamSpec::uniform(format!("{prefix}.w_hh"), &[4 * hid, hid], r));
            out.push(ParamSpec::uniform(format!("{prefix}.b_ih"), &[4 * hid], r));
            out.push(ParamSpec::uniform(format!("{prefix}.b_hh"), &[4 * hid], r));
        };
        lstm(&mut out, "flstm", self.channels, self.f_hidden);
        lstm(&mut out, "tlstm", self.f_hidden, self.t_hidden);
        let r = 1.0 / (self.t_hidden as f64).sqrt();
        out.push(ParamSpec::uniform("out.weight".into(), &[1, self.t_hidden], r));
        out.push(ParamSpec::uniform("out.bias".into(), &[1], r));
        if let Some(s) = &self.speaker_encoder {
            let r = 1.0 / (s.embed_dim as f64).sqrt();
            out.push(ParamSpec::uniform("cond.weight".into(), &[self.f_hidden, s.embed_dim], r));
            out.push(ParamSpec::uniform("cond.bias".into(), &[self.f_hidden], r));
            let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
                let r = 1.0 / ((c_in * k) as f64).sqrt();
                out.push(ParamSpec::uniform(format!("spk.{name}.weight"), &[c_out, c_in, k], r));
                out.push(ParamSpec::uniform(format!("spk.{name}.bias"), &[c_out], r));
            };
            conv("fb", s.filters, 1, s.kernel);
            conv("conv1", s.hidden, s.filters, 1);
            conv("conv2", s.hidden, s.hidden, SpeakerEncoderConfig::CONTEXT);
            conv("conv3", s.embed_dim, s.hidden, 1);
            out.push(ParamSpec::constant("spk.prelu1".into(), &[1], 0.25));
            out.push(ParamSpec::constant("spk.prelu2".into(), &[1], 0.25));
        }
        out
    }
}

/// Layout entry for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Constant(f64),
}

impl ParamSpec {
    fn uniform(name: String, shape: &[usize], range: f64) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            init: Init::Uniform(range),
        }
    }

    fn constant(name: String, shape: &[usize], value: f64) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            init: Init::Constant(value),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn lstm_count(input: usize, hid: usize) -> usize {
    4 * hid * input + 4 * hid * hid + 8 * hid
}

/// Parameters of the speaker branch: encoder plus the conditioning dense
/// layer. Zero for non-personalized configurations.
pub fn speaker_branch_params(cfg: &FtjnfConfig) -> usize {
    let Some(s) = &cfg.speaker_encoder else {
        return 0;
    };
    let fb = s.filters * s.kernel + s.filters;
    let conv1 = s.hidden * s.filters + s.hidden + 1;
    let conv2 = s.hidden * s.hidden * SpeakerEncoderConfig::CONTEXT + s.hidden + 1;
    let conv3 = s.embed_dim * s.hidden + s.embed_dim;
    let dense = s.embed_dim * cfg.f_hidden + cfg.f_hidden;
    fb + conv1 + conv2 + conv3 + dense
}

/// Closed-form parameter count.
pub fn count_params(cfg: &FtjnfConfig) -> usize {
    lstm_count(cfg.channels, cfg.f_hidden)
        + lstm_count(cfg.f_hidden, cfg.t_hidden)
        + cfg.t_hidden
        + 1
        + speaker_branch_params(cfg)
}

/// Real mask `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl MaskTensor {
    pub fn filled(frames: usize, bins: usize, v: f64) -> Self {
        Self {
            frames,
            bins,
            data: vec![v; frames * bins],
        }
    }

    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }
}

/// Conditioning vector computed from an enrollment utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub e: Vec<f64>,
}

/// `Ŝ(k,l) = M(k,l)·Y(k,l)`.
pub fn apply_mask(mask: &MaskTensor, y: &Spectrogram) -> Result<Spectrogram, ModelError> {
    if y.channels != 1 || y.frames != mask.frames || y.bins != mask.bins {
        return Err(ModelError::Input(format!(
            "mask {}x{} vs spectrogram {}x{}x{}",
            mask.frames, mask.bins, y.frames, y.bins, y.channels
        )));
    }
    let mut out = y.clone();
    for (c, &m) in out.data.iter_mut().zip(&mask.data) {
        *c = Complex64::new(c.re * m, c.im * m);
    }
    Ok(out)
}

/// Network weights together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: FtjnfConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Every array draws from its own stream keyed by
    /// its name, so adding a branch does not disturb the others.
    pub fn init(config: FtjnfConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for spec in config.param_layout() {
            let n = spec.numel();
            let data = match spec.init {
                Init::Uniform(r) => {
                    let mut g = rng::rng_for(seed, &[rng::tag(&spec.name)]);
                    (0..n).map(|_| T::from_f64(g.random_range(-r..=r))).collect()
                }
                Init::Constant(v) => vec![T::from_f64(v); n],
            };
            params.push(spec.name.clone(), Tensor::new(&spec.shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// All-zero weights.
    pub fn zeros(config: FtjnfConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for spec in config.param_layout() {
            params.push(spec.name.clone(), Tensor::zeros(&spec.shape));
        }
        Ok(Self { config, params })
    }

    /// Checks that the stored arrays are exactly those of the layout.
    pub fn check_layout(&self) -> Result<(), ModelError> {
        let layout = self.config.param_layout();
        if layout.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for (spec, p) in layout.iter().zip(&self.params.params) {
            if spec.name != p.name || spec.shape != p.value.shape {
                return Err(ModelError::Config(format!(
                    "parameter `{}` {:?} does not match layout `{}` {:?}",
                    p.name, p.value.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Embedding of an enrollment waveform.
    pub fn speaker_encode(&self, enroll: &AudioBuffer) -> Result<SpeakerEmbedding, ModelError> {
        let mut tape = Tape::new();
        let vars = ModelVars::constants(self, &mut tape)?;
        let e = graph::speaker_embedding(&mut tape, &vars, &self.config, &enroll.samples)?;
        Ok(SpeakerEmbedding {
            e: tape.value(e).to_f64(),
        })
    }

    /// Mask from normalized magnitudes `[T, F, C]` and an optional embedding.
    pub fn ftjnf_forward(
        &self,
        mag_norm: &MagTensor,
        embedding: Option<&SpeakerEmbedding>,
    ) -> Result<MaskTensor, ModelError> {
        let mut tape = Tape::new();
        let vars = ModelVars::constants(self, &mut tape)?;
        let e = match embedding {
            Some(emb) => {
                let n = emb.e.len();
                Some(tape.constant(Tensor::from_f64(&[n], &emb.e)?))
            }
            None => None,
        };
        let m = graph::ftjnf_mask(&mut tape, &vars, &self.config, mag_norm, e)?;
        Ok(MaskTensor {
            frames: mag_norm.frames,
            bins: mag_norm.bins,
            data: tape.value(m).to_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mag(rng: &mut ChaCha8Rng, frames: usize, bins: usize, channels: usize) -> MagTensor {
        MagTensor {
            frames,
            bins,
            channels,
            data: (0..frames * bins * channels)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        }
    }

    fn small(arch: Arch) -> FtjnfConfig {
        FtjnfConfig {
            channels: arch.channels(),
            f_hidden: 8,
            t_hidden: 4,
            bins: 9,
            speaker_encoder: arch.personalized().then_some(SpeakerEncoderConfig {
                filters: 6,
                kernel: 16,
                stride: 8,
                hidden: 5,
                embed_dim: 4,
            }),
        }
    }

    #[test]
    fn full_size_counts() {
        assert_eq!(count_params(&FtjnfConfig::for_arch(Arch::Se)), 1_383_553);
        assert_eq!(count_params(&FtjnfConfig::for_arch(Arch::AsSe)), 1_385_601);
        assert_eq!(speaker_branch_params(&FtjnfConfig::for_arch(Arch::Pse)), 1_810_007);
    }

    #[test]
    fn formula_matches_layout_enumeration() {
        for arch in Arch::ALL {
            for cfg in [FtjnfConfig::for_arch(arch), FtjnfConfig::tiny(arch), small(arch)] {
                let enumerated: usize = cfg.param_layout().iter().map(ParamSpec::numel).sum();
                assert_eq!(count_params(&cfg), enumerated, "{arch}");
            }
        }
    }

    #[test]
    fn layout_names_unique() {
        let layout = FtjnfConfig::for_arch(Arch::PasSe).param_layout();
        let mut names: Vec<_> = layout.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }

    #[test]
    fn arch_parsing() {
        for arch in Arch::ALL {
            assert_eq!(arch.name().parse::<Arch>().unwrap(), arch);
        }
        assert!("xx".parse::<Arch>().is_err());
    }

    #[test]
    fn zero_weights_give_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::zeros(small(Arch::AsSe)).unwrap();
        let mask = model.ftjnf_forward(&random_mag(&mut rng, 5, 9, 2), None).unwrap();
        assert!(mask.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mask_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::<f64>::init(small(Arch::Se), 3).unwrap();
        // Large output weights push tanh towards saturation.
        for v in &mut model.params.get_mut("out.weight").unwrap().data {
            *v *= 50.0;
        }
        let mask = model.ftjnf_forward(&random_mag(&mut rng, 6, 9, 1), None).unwrap();
        assert!(mask.data.iter().all(|&m| m > -1.0 && m < 1.0));
    }

    #[test]
    fn time_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f64>::init(small(Arch::AsSe), 5).unwrap();
        let x = random_mag(&mut rng, 8, 9, 2);
        let base = model.ftjnf_forward(&x, None).unwrap();
        let t_star = 4;
        let mut y = x.clone();
        for f in 0..9 {
            for c in 0..2 {
                y.data[(t_star * 9 + f) * 2 + c] += 1.0;
            }
        }
        let pert = model.ftjnf_forward(&y, None).unwrap();
        for t in 0..8 {
            let changed = (0..9).any(|f| base.at(t, f) != pert.at(t, f));
            assert_eq!(changed, t >= t_star, "frame {t}");
        }
    }

    #[test]
    fn missing_embedding_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::<f64>::init(small(Arch::Pse), 7).unwrap();
        let x = random_mag(&mut rng, 3, 9, 1);
        assert!(matches!(
            model.ftjnf_forward(&x, None),
            Err(ModelError::MissingEmbedding)
        ));
        let se = Model::<f64>::init(small(Arch::Se), 7).unwrap();
        let emb = SpeakerEmbedding { e: vec![0.0; 4] };
        assert!(matches!(
            se.ftjnf_forward(&x, Some(&emb)),
            Err(ModelError::UnexpectedEmbedding)
        ));
    }

    #[test]
    fn zero_projection_closes_the_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = Model::<f64>::init(small(Arch::Pse), 9).unwrap();
        for name in ["cond.weight", "cond.bias"] {
            model.params.get_mut(name).unwrap().data.fill(0.0);
        }
        let emb = SpeakerEmbedding { e: vec![0.3, -0.1, 0.7, 0.2] };
        let a = model.ftjnf_forward(&random_mag(&mut rng, 4, 9, 1), Some(&emb)).unwrap();
        let b = model.ftjnf_forward(&random_mag(&mut rng, 4, 9, 1), Some(&emb)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_projections_give_equal_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = Model::<f64>::init(small(Arch::Pse), 11).unwrap();
        // Make the last embedding coordinate invisible to the dense layer.
        let w = model.params.get_mut("cond.weight").unwrap();
        for row in w.data.chunks_mut(4) {
            row[3] = 0.0;
        }
        let x = random_mag(&mut rng, 4, 9, 1);
        let e1 = SpeakerEmbedding { e: vec![0.3, -0.1, 0.7, 0.2] };
        let e2 = SpeakerEmbedding { e: vec![0.3, -0.1, 0.7, -5.0] };
        assert_eq!(
            model.ftjnf_forward(&x, Some(&e1)).unwrap(),
            model.ftjnf_forward(&x, Some(&e2)).unwrap()
        );
    }

    #[test]
    fn zero_enrollment_zero_biases_give_zero_embedding() {
        let mut model = Model::<f64>::init(small(Arch::Pse), 12).unwrap();
        for p in &mut model.params.params {
            if p.name.starts_with("spk.") && p.name.ends_with(".bias") {
                p.value.data.fill(0.0);
            }
        }
        let e = model.speaker_encode(&AudioBuffer::zeros(400)).unwrap();
        assert_eq!(e.e, vec![0.0; 4]);
    }

    #[test]
    fn embedding_ignores_enrollment_level() {
        let model = Model::<f64>::init(small(Arch::Pse), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = AudioBuffer::new((0..400).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = model.speaker_encode(&x).unwrap();
        let b = model.speaker_encode(&x.scaled(0.01)).unwrap();
        for (p, q) in a.e.iter().zip(&b.e) {
            assert!((p - q).abs() < 1e-9 * p.abs().max(1.0));
        }
    }

    #[test]
    fn short_enrollment_is_rejected() {
        let model = Model::<f64>::init(small(Arch::Pse), 13).unwrap();
        assert!(matches!(
            model.speaker_encode(&AudioBuffer::zeros(20)),
            Err(ModelError::EnrollmentTooShort { .. })
        ));
    }

    #[test]
    fn apply_mask_scales_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = StftConfig::default();
        let mut y = Spectrogram::zeros(3, cfg);
        for c in &mut y.data {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let mask = MaskTensor {
            frames: 3,
            bins: 257,
            data: (0..3 * 257).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let s = apply_mask(&mask, &y).unwrap();
        for ((a, b), m) in s.data.iter().zip(&y.data).zip(&mask.data) {
            assert!((a.norm() - m.abs() * b.norm()).abs() < 1e-15);
        }
        let zero = apply_mask(&MaskTensor::filled(3, 257, 0.0), &y).unwrap();
        assert!(zero.data.iter().all(|c| c.norm() == 0.0));
        assert!(apply_mask(&MaskTensor::filled(2, 257, 0.0), &y).is_err());
    }
}
