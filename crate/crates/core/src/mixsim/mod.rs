//! Two-sensor mixing.
//!
//! Each sensor observes `y = s + n + v`: own voice, environmental noise and an
//! interfering talker. Noise and interferer levels are set by SNR/SIR at the
//! outer microphone and the same gain is applied to the in-ear components.
//! Training configurations decide which in-ear components are simulated:
//!
//! | config | outer      | in-ear              |
//! |--------|------------|---------------------|
//! | A      | n_o, v_o   | none                |
//! | B      | n_o        | n_i                 |
//! | C      | n_o, v_o   | n_i                 |
//! | D      | n_o, v_o   | n_i, a·v_o          |

mod corpus;
mod evalset;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, IrSet};
use crate::dsp::{convolve, DspError};

pub use corpus::{
    draw_noise_clip, draw_training_example, random_clip, sample_enrollment, spatialize_interferer,
    Corpus, EnrollmentRequest, EnrollmentSpec, NoiseSource, Utterance,
};
pub use evalset::{build_eval_set, load_eval_set, EvalAudio, EvalItem, EvalPaths, EvalSetOptions};

#[derive(Debug, Error)]
pub enum MixError {
    #[error("length mismatch: {what} ({a} vs {b} samples)")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("{0} has zero energy")]
    ZeroEnergy(&'static str),
    #[error("speaker `{0}` has no other utterance to enroll with")]
    SingleUtterance(String),
    #[error("no impulse response for direction {0}")]
    MissingIr(usize),
    #[error("corpus has no impulse-response set (needed to place interferers)")]
    NoIrSet,
    #[error("corpus has no noise entries")]
    NoNoise,
    #[error("no interfering speaker available for `{0}`")]
    NoInterferer(String),
    #[error("no utterances in the requested split")]
    EmptySplit,
    #[error("invalid mixing configuration: {0}")]
    Config(String),
    #[error("eval set: {0}")]
    EvalSet(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Training configuration of the in-ear noise/interferer simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfigId {
    A,
    B,
    C,
    D,
}

impl ConfigId {
    pub const ALL: [ConfigId; 4] = [ConfigId::A, ConfigId::B, ConfigId::C, ConfigId::D];
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ConfigId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(ConfigId::A),
            "B" => Ok(ConfigId::B),
            "C" => Ok(ConfigId::C),
            "D" => Ok(ConfigId::D),
            _ => Err(format!("unknown mix config `{s}` (expected A, B, C or D)")),
        }
    }
}

/// Outer (OM) or in-ear (IM) microphone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sensor {
    #[serde(rename = "OM")]
    Outer,
    #[serde(rename = "IM")]
    InEar,
}

impl Sensor {
    pub fn name(self) -> &'static str {
        match self {
            Sensor::Outer => "OM",
            Sensor::InEar => "IM",
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sensor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "OM" | "OUTER" => Ok(Sensor::Outer),
            "IM" | "INEAR" | "IN-EAR" => Ok(Sensor::InEar),
            _ => Err(format!("unknown sensor `{s}` (expected OM or IM)")),
        }
    }
}

/// Evaluation condition: noise only, interferer only, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    N,
    V,
    #[serde(rename = "N+V")]
    NV,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::N, Condition::V, Condition::NV];

    pub fn name(self) -> &'static str {
        match self {
            Condition::N => "N",
            Condition::V => "V",
            Condition::NV => "N+V",
        }
    }

    pub fn has_noise(self) -> bool {
        matches!(self, Condition::N | Condition::NV)
    }

    pub fn has_interferer(self) -> bool {
        matches!(self, Condition::V | Condition::NV)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "N" => Ok(Condition::N),
            "V" => Ok(Condition::V),
            "N+V" | "NV" => Ok(Condition::NV),
            _ => Err(format!("unknown condition `{s}` (expected N, V or N+V)")),
        }
    }
}

/// A pair of equally long signals, one per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSensor {
    pub outer: AudioBuffer,
    pub inear: AudioBuffer,
}

impl TwoSensor {
    pub fn new(outer: AudioBuffer, inear: AudioBuffer) -> Result<Self, MixError> {
        if outer.len() != inear.len() {
            return Err(MixError::LengthMismatch {
                what: "outer vs in-ear",
                a: outer.len(),
                b: inear.len(),
            });
        }
        Ok(Self { outer, inear })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            outer: AudioBuffer::zeros(len),
            inear: AudioBuffer::zeros(len),
        }
    }

    pub fn len(&self) -> usize {
        self.outer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outer.is_empty()
    }

    pub fn get(&self, sensor: Sensor) -> &AudioBuffer {
        match sensor {
            Sensor::Outer => &self.outer,
            Sensor::InEar => &self.inear,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            outer: self.outer.scaled(gain),
            inear: self.inear.scaled(gain),
        }
    }

    /// Same cyclic window of both sensors.
    pub fn cyclic_clip(&self, offset: usize, len: usize) -> Self {
        Self {
            outer: self.outer.cyclic_clip(offset, len),
            inear: self.inear.cyclic_clip(offset, len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub config_id: ConfigId,
    pub p_noise: f64,
    pub p_interferer: f64,
    pub snr_range_db: (f64, f64),
    pub sir_range_db: (f64, f64),
    pub a_range: (f64, f64),
    pub clip_len_s: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            config_id: ConfigId::D,
            p_noise: 0.75,
            p_interferer: 0.75,
            snr_range_db: (-10.0, 10.0),
            sir_range_db: (-10.0, 10.0),
            a_range: (0.001, 1.0),
            clip_len_s: 3.0,
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn with_config(config_id: ConfigId) -> Self {
        Self {
            config_id,
            ..Self::default()
        }
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_len_s * f64::from(crate::SAMPLE_RATE)).round() as usize
    }

    /// Collects every invalid field into one error.
    pub fn validate(&self) -> Result<(), MixError> {
        let mut bad = Vec::new();
        for (name, p) in [("p_noise", self.p_noise), ("p_interferer", self.p_interferer)] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, (lo, hi)) in [
            ("snr_range_db", self.snr_range_db),
            ("sir_range_db", self.sir_range_db),
            ("a_range", self.a_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                bad.push(format!("{name} = [{lo}, {hi}] is empty or not finite"));
            }
        }
        if !(self.clip_len_s > 0.0 && self.clip_len_s.is_finite()) {
            bad.push(format!("clip_len_s = {} must be positive", self.clip_len_s));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(MixError::Config(bad.join("; ")))
        }
    }
}

/// Draws and provenance of one mixture.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixMeta {
    pub snr_db: Option<f64>,
    pub sir_db: Option<f64>,
    pub a: Option<f64>,
    /// Absent for evaluation mixtures, which follow the physical model.
    pub config_id: Option<ConfigId>,
    pub target_speaker: String,
    pub interferer_speaker: Option<String>,
    /// Gain applied to the raw noise clip on both sensors.
    pub noise_gain: Option<f64>,
    /// Gain applied to the raw interferer clip on both sensors.
    pub interferer_gain: Option<f64>,
}

/// One mixture with all of its components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub s_o: AudioBuffer,
    pub s_i: AudioBuffer,
    pub n_o: AudioBuffer,
    pub n_i: AudioBuffer,
    pub v_o: AudioBuffer,
    pub v_i: AudioBuffer,
    pub y_o: AudioBuffer,
    pub y_i: AudioBuffer,
    pub meta: MixMeta,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.s_o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_o.is_empty()
    }

    pub fn target(&self) -> TwoSensor {
        TwoSensor {
            outer: self.s_o.clone(),
            inear: self.s_i.clone(),
        }
    }

    pub fn mixture(&self) -> TwoSensor {
        TwoSensor {
            outer: self.y_o.clone(),
            inear: self.y_i.clone(),
        }
    }
}

fn sum3(s: &AudioBuffer, n: &AudioBuffer, v: &AudioBuffer) -> AudioBuffer {
    AudioBuffer {
        samples: s
            .samples
            .iter()
            .zip(&n.samples)
            .zip(&v.samples)
            .map(|((a, b), c)| a + b + c)
            .collect(),
        rate: s.rate,
    }
}

/// Gain `g` such that `P(s) / P(g·n)` equals `snr_db`.
pub fn scale_to_snr(s_ref: &AudioBuffer, n_ref: &AudioBuffer, snr_db: f64) -> Result<f64, MixError> {
    let ps = s_ref.power();
    let pn = n_ref.power();
    if ps == 0.0 {
        return Err(MixError::ZeroEnergy("target"));
    }
    if pn == 0.0 {
        return Err(MixError::ZeroEnergy("noise"));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

fn check_len(what: &'static str, a: &TwoSensor, b: &TwoSensor) -> Result<(), MixError> {
    if a.len() != b.len() {
        return Err(MixError::LengthMismatch {
            what,
            a: a.len(),
            b: b.len(),
        });
    }
    Ok(())
}

fn assemble(
    target: &TwoSensor,
    n: TwoSensor,
    v_o: AudioBuffer,
    v_i: AudioBuffer,
    meta: MixMeta,
) -> MixtureExample {
    let y_o = sum3(&target.outer, &n.outer, &v_o);
    let y_i = sum3(&target.inear, &n.inear, &v_i);
    MixtureExample {
        s_o: target.outer.clone(),
        s_i: target.inear.clone(),
        n_o: n.outer,
        n_i: n.inear,
        v_o,
        v_i,
        y_o,
        y_i,
        meta,
    }
}

/// Training mixture following `cfg`.
///
/// Draws happen in a fixed order (noise inclusion, interferer inclusion, SNR,
/// SIR, attenuation) and all five are always consumed, so the random stream
/// does not depend on earlier outcomes.
pub fn mix_example<R: Rng + ?Sized>(
    target: &TwoSensor,
    noise: &TwoSensor,
    interferer: &TwoSensor,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixtureExample, MixError> {
    check_len("target vs noise", target, noise)?;
    check_len("target vs interferer", target, interferer)?;
    if target.outer.power() == 0.0 {
        return Err(MixError::ZeroEnergy("target"));
    }
    let include_noise = rng.random_bool(cfg.p_noise);
    let include_interf = rng.random_bool(cfg.p_interferer) && cfg.config_id != ConfigId::B;
    let snr = rng.random_range(cfg.snr_range_db.0..=cfg.snr_range_db.1);
    let sir = rng.random_range(cfg.sir_range_db.0..=cfg.sir_range_db.1);
    let a = rng.random_range(cfg.a_range.0..=cfg.a_range.1);

    let len = target.len();
    let mut meta = MixMeta {
        config_id: Some(cfg.config_id),
        ..MixMeta::default()
    };
    let mut n = TwoSensor::zeros(len);
    if include_noise {
        let g = scale_to_snr(&target.outer, &noise.outer, snr)?;
        n = noise.scaled(g);
        meta.snr_db = Some(snr);
        meta.noise_gain = Some(g);
    }
    let mut v = TwoSensor::zeros(len);
    if include_interf {
        let g = scale_to_snr(&target.outer, &interferer.outer, sir)?;
        v = interferer.scaled(g);
        meta.sir_db = Some(sir);
        meta.interferer_gain = Some(g);
    }
    let zeros = || AudioBuffer::zeros(len);
    let (n_i, v_i) = match cfg.config_id {
        ConfigId::A => (zeros(), zeros()),
        ConfigId::B | ConfigId::C => (n.inear, zeros()),
        ConfigId::D => {
            if include_interf {
                meta.a = Some(a);
            }
            (n.inear, v.outer.scaled(a))
        }
    };
    let n = TwoSensor {
        outer: n.outer,
        inear: n_i,
    };
    Ok(assemble(target, n, v.outer, v_i, meta))
}

/// Evaluation mixture with the physical in-ear components for whatever the
/// condition includes.
pub fn build_eval_condition(
    target: &TwoSensor,
    noise: &TwoSensor,
    interferer: &TwoSensor,
    condition: Condition,
    snr_db: f64,
    sir_db: f64,
) -> Result<MixtureExample, MixError> {
    check_len("target vs noise", target, noise)?;
    check_len("target vs interferer", target, interferer)?;
    let len = target.len();
    let mut meta = MixMeta::default();
    let n = if condition.has_noise() {
        let g = scale_to_snr(&target.outer, &noise.outer, snr_db)?;
        meta.snr_db = Some(snr_db);
        meta.noise_gain = Some(g);
        noise.scaled(g)
    } else {
        TwoSensor::zeros(len)
    };
    let v = if condition.has_interferer() {
        let g = scale_to_snr(&target.outer, &interferer.outer, sir_db)?;
        meta.sir_db = Some(sir_db);
        meta.interferer_gain = Some(g);
        interferer.scaled(g)
    } else {
        TwoSensor::zeros(len)
    };
    Ok(assemble(target, n, v.outer, v.inear, meta))
}

/// Sums per-direction mono sources convolved with each direction's impulse
/// responses. Output length equals the longest source.
pub fn spatialize(sources: &[AudioBuffer], irs: &IrSet) -> Result<TwoSensor, MixError> {
    let len = sources.iter().map(AudioBuffer::len).max().unwrap_or(0);
    let mut outer = vec![0.0; len];
    let mut inear = vec![0.0; len];
    for (d, src) in sources.iter().enumerate() {
        let (ho, hi) = irs.directions.get(d).ok_or(MixError::MissingIr(d))?;
        for (acc, h) in [(&mut outer, ho), (&mut inear, hi)] {
            let y = convolve(src, h)?;
            for (a, v) in acc.iter_mut().zip(&y.samples) {
                *a += v;
            }
        }
    }
    Ok(TwoSensor {
        outer: AudioBuffer::new(outer),
        inear: AudioBuffer::new(inear),
    })
}

/// Enrollment signal for `sensor` at a given SNR, with the SNR defined at
/// the outer microphone. `+inf` returns the clean channel; `-inf` returns
/// the noise alone, at the level it would have at 0 dB.
pub fn mix_enrollment(
    clean: &TwoSensor,
    noise: &TwoSensor,
    sensor: Sensor,
    snr_db: f64,
) -> Result<AudioBuffer, MixError> {
    check_len("enrollment vs noise", clean, noise)?;
    if snr_db == f64::INFINITY {
        return Ok(clean.get(sensor).clone());
    }
    if snr_db.is_nan() {
        return Err(MixError::Config("enrollment SNR is NaN".into()));
    }
    let level = if snr_db == f64::NEG_INFINITY { 0.0 } else { snr_db };
    let g = scale_to_snr(&clean.outer, &noise.outer, level)?;
    let n = noise.get(sensor);
    if snr_db == f64::NEG_INFINITY {
        return Ok(n.scaled(g));
    }
    let s = clean.get(sensor);
    Ok(AudioBuffer {
        samples: s
            .samples
            .iter()
            .zip(&n.samples)
            .map(|(a, b)| a + g * b)
            .collect(),
        rate: s.rate,
    })
}

/// `10·log10(P(s)/P(n))`.
pub fn snr_db(s: &AudioBuffer, n: &AudioBuffer) -> f64 {
    10.0 * (s.power() / n.power()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, len: usize, amp: f64) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|_| rng.random_range(-amp..amp)).collect())
    }

    fn pair(rng: &mut ChaCha8Rng, len: usize) -> TwoSensor {
        TwoSensor {
            outer: noise(rng, len, 1.0),
            inear: noise(rng, len, 0.3),
        }
    }

    #[test]
    fn unit_powers() {
        let s = AudioBuffer::new(vec![1.0, -1.0, 1.0, -1.0]);
        assert!((scale_to_snr(&s, &s, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((scale_to_snr(&s, &s, 10.0).unwrap() - 0.316_227_766_016_838).abs() < 1e-12);
        assert!(scale_to_snr(&AudioBuffer::zeros(4), &s, 0.0).is_err());
        assert!(scale_to_snr(&s, &AudioBuffer::zeros(4), 0.0).is_err());
    }

    #[test]
    fn realized_snr_matches_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = noise(&mut rng, 500, 0.7);
            let n = noise(&mut rng, 500, 0.1);
            let want = rng.random_range(-30.0..30.0);
            let g = scale_to_snr(&s, &n, want).unwrap();
            assert!((snr_db(&s, &n.scaled(g)) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn config_a_leaves_in_ear_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, n, v) = (pair(&mut rng, 300), pair(&mut rng, 300), pair(&mut rng, 300));
        let cfg = MixConfig {
            p_noise: 1.0,
            p_interferer: 1.0,
            ..MixConfig::with_config(ConfigId::A)
        };
        let ex = mix_example(&t, &n, &v, &cfg, &mut rng).unwrap();
        assert_eq!(ex.y_i, t.inear);
        assert!(ex.meta.snr_db.is_some() && ex.meta.sir_db.is_some());
    }

    #[test]
    fn config_d_in_ear_interferer_is_attenuated_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, n, v) = (pair(&mut rng, 300), pair(&mut rng, 300), pair(&mut rng, 300));
        let cfg = MixConfig {
            p_interferer: 1.0,
            ..MixConfig::with_config(ConfigId::D)
        };
        let ex = mix_example(&t, &n, &v, &cfg, &mut rng).unwrap();
        let a = ex.meta.a.unwrap();
        assert!((0.001..=1.0).contains(&a));
        for (vi, vo) in ex.v_i.samples.iter().zip(&ex.v_o.samples) {
            assert_eq!(*vi, a * vo);
        }
    }

    #[test]
    fn no_draws_means_clean_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, n, v) = (pair(&mut rng, 300), pair(&mut rng, 300), pair(&mut rng, 300));
        for id in ConfigId::ALL {
            let cfg = MixConfig {
                p_noise: 0.0,
                p_interferer: 0.0,
                ..MixConfig::with_config(id)
            };
            let ex = mix_example(&t, &n, &v, &cfg, &mut rng).unwrap();
            assert_eq!(ex.y_o, t.outer);
            assert_eq!(ex.y_i, t.inear);
        }
    }

    #[test]
    fn config_b_never_has_interferer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, n, v) = (pair(&mut rng, 100), pair(&mut rng, 100), pair(&mut rng, 100));
        let cfg = MixConfig {
            p_interferer: 1.0,
            ..MixConfig::with_config(ConfigId::B)
        };
        for _ in 0..20 {
            let ex = mix_example(&t, &n, &v, &cfg, &mut rng).unwrap();
            assert!(ex.v_o.samples.iter().all(|&x| x == 0.0));
            assert!(ex.v_i.samples.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn length_mismatch_and_silent_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, n, v) = (pair(&mut rng, 100), pair(&mut rng, 90), pair(&mut rng, 100));
        let cfg = MixConfig::default();
        assert!(matches!(
            mix_example(&t, &n, &v, &cfg, &mut rng),
            Err(MixError::LengthMismatch { .. })
        ));
        let silent = TwoSensor::zeros(100);
        assert!(matches!(
            mix_example(&silent, &v, &v, &cfg, &mut rng),
            Err(MixError::ZeroEnergy(_))
        ));
    }

    #[test]
    fn same_seed_same_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, n, v) = (pair(&mut rng, 100), pair(&mut rng, 100), pair(&mut rng, 100));
        let cfg = MixConfig::default();
        let a = mix_example(&t, &n, &v, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mix_example(&t, &n, &v, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let len = 20_000;
        let (t, n, v) = (pair(&mut rng, len), pair(&mut rng, len), pair(&mut rng, len));
        let ex = build_eval_condition(&t, &n, &v, Condition::N, 0.0, 0.0).unwrap();
        assert!(ex.v_o.samples.iter().chain(&ex.v_i.samples).all(|&x| x == 0.0));
        let ex = build_eval_condition(&t, &n, &v, Condition::V, 0.0, 0.0).unwrap();
        assert!(ex.n_o.samples.iter().chain(&ex.n_i.samples).all(|&x| x == 0.0));
        assert!(ex.v_i.samples.iter().any(|&x| x != 0.0));
        let ex = build_eval_condition(&t, &n, &v, Condition::NV, 0.0, 0.0).unwrap();
        let mut interference = ex.n_o.clone();
        for (a, b) in interference.samples.iter_mut().zip(&ex.v_o.samples) {
            *a += b;
        }
        let r = snr_db(&ex.s_o, &interference);
        assert!((r + 10.0 * 2f64.log10()).abs() < 0.1, "{r}");
    }

    #[test]
    fn spatialize_unit_and_delayed_impulses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let src = noise(&mut rng, 50, 1.0);
        let unit = AudioBuffer::new(vec![1.0]);
        let irs = IrSet {
            directions: vec![(unit.clone(), unit.clone())],
        };
        let out = spatialize(std::slice::from_ref(&src), &irs).unwrap();
        assert_eq!(out.outer, src);
        assert_eq!(out.inear, src);

        let src2 = noise(&mut rng, 50, 1.0);
        let delayed = |d: usize| {
            let mut h = vec![0.0; d + 1];
            h[d] = 1.0;
            AudioBuffer::new(h)
        };
        let irs = IrSet {
            directions: vec![(delayed(2), delayed(3)), (delayed(5), delayed(0))],
        };
        let out = spatialize(&[src.clone(), src2.clone()], &irs).unwrap();
        for t in 0..50 {
            let at = |x: &AudioBuffer, d: usize| if t >= d { x.samples[t - d] } else { 0.0 };
            assert!((out.outer.samples[t] - (at(&src, 2) + at(&src2, 5))).abs() < 1e-15);
            assert!((out.inear.samples[t] - (at(&src, 3) + at(&src2, 0))).abs() < 1e-15);
        }
        assert!(matches!(
            spatialize(&[src.clone(), src2, src], &irs),
            Err(MixError::MissingIr(2))
        ));
    }

    #[test]
    fn enrollment_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = pair(&mut rng, 4000);
        let n = pair(&mut rng, 4000);
        assert_eq!(
            mix_enrollment(&clean, &n, Sensor::InEar, f64::INFINITY).unwrap(),
            clean.inear
        );
        let y = mix_enrollment(&clean, &n, Sensor::Outer, 0.0).unwrap();
        let mut resid = y.clone();
        for (r, s) in resid.samples.iter_mut().zip(&clean.outer.samples) {
            *r -= s;
        }
        assert!(snr_db(&clean.outer, &resid).abs() < 1e-9);
        let only = mix_enrollment(&clean, &n, Sensor::Outer, f64::NEG_INFINITY).unwrap();
        let g = scale_to_snr(&clean.outer, &n.outer, 0.0).unwrap();
        assert_eq!(only, n.outer.scaled(g));
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let cfg = MixConfig {
            p_noise: 1.5,
            snr_range_db: (5.0, -5.0),
            clip_len_s: 0.0,
            ..MixConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("p_noise") && msg.contains("snr_range_db") && msg.contains("clip_len_s"));
    }
}
