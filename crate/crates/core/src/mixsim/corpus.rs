//! In-memory corpus and the random draws that turn it into mixtures.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{mix_enrollment, mix_example, spatialize, MixConfig, MixError, MixtureExample, Sensor, TwoSensor};
use crate::audio::{load_manifest, read_wav, AudioBuffer, IrSet, ManifestEntry, NoiseKind, Split};
use crate::dsp::convolve;

/// Redraws before a silent clip is reported as an error.
const MAX_REDRAWS: usize = 8;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub audio: TwoSensor,
}

#[derive(Debug, Clone)]
pub enum NoiseSource {
    Paired { id: String, audio: TwoSensor },
    /// Mono recording placed around the head through `corpus.ir_sets[ir_set]`.
    Mono { id: String, audio: AudioBuffer, ir_set: usize },
}

impl NoiseSource {
    pub fn id(&self) -> &str {
        match self {
            NoiseSource::Paired { id, .. } | NoiseSource::Mono { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub noises: Vec<NoiseSource>,
    pub ir_sets: Vec<IrSet>,
}

impl Corpus {
    /// Reads every file named by the manifest. IR sets shared by several
    /// noise entries are loaded once.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self, MixError> {
        let entries = load_manifest(manifest, false)?;
        let mut corpus = Corpus::default();
        let mut ir_dirs = Vec::new();
        for e in entries {
            match e {
                ManifestEntry::Utterance(u) => {
                    let audio = TwoSensor::new(read_wav(&u.path_outer)?, read_wav(&u.path_inear)?)?;
                    corpus.utterances.push(Utterance {
                        id: u.id,
                        speaker: u.speaker,
                        split: u.split,
                        audio,
                    });
                }
                ManifestEntry::Noise(n) => {
                    let source = match n.kind {
                        NoiseKind::Paired {
                            path_outer,
                            path_inear,
                        } => NoiseSource::Paired {
                            id: n.id,
                            audio: TwoSensor::new(read_wav(path_outer)?, read_wav(path_inear)?)?,
                        },
                        NoiseKind::MonoWithIrs { path, ir_set } => {
                            let idx = match ir_dirs.iter().position(|d| *d == ir_set) {
                                Some(i) => i,
                                None => {
                                    corpus.ir_sets.push(IrSet::load(&ir_set)?);
                                    ir_dirs.push(ir_set);
                                    ir_dirs.len() - 1
                                }
                            };
                            NoiseSource::Mono {
                                id: n.id,
                                audio: read_wav(path)?,
                                ir_set: idx,
                            }
                        }
                    };
                    corpus.noises.push(source);
                }
            }
        }
        Ok(corpus)
    }

    /// Indices of the utterances in `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split == split)
            .collect()
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.utterances.iter().map(|u| u.speaker.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Utterance indices of `speaker`, optionally restricted to one split.
    pub fn utterances_of(&self, speaker: &str, split: Option<Split>) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| {
                let u = &self.utterances[i];
                u.speaker == speaker && split.is_none_or(|s| u.split == s)
            })
            .collect()
    }

    /// Impulse responses used to place interferers.
    pub fn interferer_irs(&self) -> Result<&IrSet, MixError> {
        self.ir_sets.first().ok_or(MixError::NoIrSet)
    }
}

/// `len` samples at a uniformly random offset; shorter signals are padded
/// cyclically from the start.
pub fn random_clip<R: Rng + ?Sized>(x: &TwoSensor, len: usize, rng: &mut R) -> TwoSensor {
    let n = x.len();
    let offset = if n > len { rng.random_range(0..=n - len) } else { 0 };
    x.cyclic_clip(offset, len)
}

fn random_mono_clip<R: Rng + ?Sized>(x: &AudioBuffer, len: usize, rng: &mut R) -> AudioBuffer {
    let n = x.len();
    let offset = if n > len { rng.random_range(0..=n - len) } else { 0 };
    x.cyclic_clip(offset, len)
}

fn longest_ir(irs: &IrSet) -> usize {
    irs.directions
        .iter()
        .map(|(o, i)| o.len().max(i.len()))
        .max()
        .unwrap_or(1)
}

fn drop_head(x: TwoSensor, head: usize) -> TwoSensor {
    let cut = |b: AudioBuffer| AudioBuffer {
        samples: b.samples[head..].to_vec(),
        rate: b.rate,
    };
    TwoSensor {
        outer: cut(x.outer),
        inear: cut(x.inear),
    }
}

/// Noise clip of `len` samples from a uniformly chosen noise source. Mono
/// sources play an independent random segment from every direction of their
/// IR set; the convolution start-up transient is discarded.
pub fn draw_noise_clip<R: Rng + ?Sized>(
    corpus: &Corpus,
    len: usize,
    rng: &mut R,
) -> Result<TwoSensor, MixError> {
    let source = corpus.noises.choose(rng).ok_or(MixError::NoNoise)?;
    match source {
        NoiseSource::Paired { audio, .. } => Ok(random_clip(audio, len, rng)),
        NoiseSource::Mono { audio, ir_set, .. } => {
            let irs = &corpus.ir_sets[*ir_set];
            let warm = longest_ir(irs) - 1;
            let segments: Vec<AudioBuffer> = (0..irs.directions.len())
                .map(|_| random_mono_clip(audio, len + warm, rng))
                .collect();
            Ok(drop_head(spatialize(&segments, irs)?, warm))
        }
    }
}

/// A talker at one direction of `irs`, `len` samples long.
pub fn spatialize_interferer(
    speech: &AudioBuffer,
    irs: &IrSet,
    direction: usize,
    len: usize,
) -> Result<TwoSensor, MixError> {
    let (ho, hi) = irs
        .directions
        .get(direction)
        .ok_or(MixError::MissingIr(direction))?;
    Ok(TwoSensor {
        outer: convolve(speech, ho)?.truncated(len),
        inear: convolve(speech, hi)?.truncated(len),
    })
}

/// Interferer clip: a random utterance of a speaker other than `target`
/// from `split`, taken from its outer channel and placed at a random
/// direction. Returns the clip and the interferer's speaker id.
pub(crate) fn draw_interferer<R: Rng + ?Sized>(
    corpus: &Corpus,
    target: &str,
    split: Option<Split>,
    len: usize,
    rng: &mut R,
) -> Result<(TwoSensor, usize), MixError> {
    let others: Vec<String> = corpus
        .speakers()
        .into_iter()
        .filter(|s| s != target && !corpus.utterances_of(s, split).is_empty())
        .collect();
    let speaker = others
        .choose(rng)
        .ok_or_else(|| MixError::NoInterferer(target.to_string()))?;
    let utt = *corpus
        .utterances_of(speaker, split)
        .choose(rng)
        .expect("speaker has utterances");
    let irs = corpus.interferer_irs()?;
    let direction = rng.random_range(0..irs.directions.len());
    let warm = longest_ir(irs) - 1;
    let dry = random_mono_clip(&corpus.utterances[utt].audio.outer, len + warm, rng);
    let wet = spatialize_interferer(&dry, irs, direction, len + warm)?;
    Ok((drop_head(wet, warm), utt))
}

/// One training mixture for utterance `target`: a random clip of it, a
/// noise clip and an interferer from the same split, mixed under `cfg`.
/// Silent draws are redrawn a few times before giving up.
pub fn draw_training_example<R: Rng + ?Sized>(
    corpus: &Corpus,
    target: usize,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixtureExample, MixError> {
    let utt = &corpus.utterances[target];
    let len = cfg.clip_samples();
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let s = random_clip(&utt.audio, len, rng);
        let n = draw_noise_clip(corpus, len, rng)?;
        let (v, v_utt) = draw_interferer(corpus, &utt.speaker, Some(utt.split), len, rng)?;
        match mix_example(&s, &n, &v, cfg, rng) {
            Ok(mut ex) => {
                ex.meta.target_speaker = utt.speaker.clone();
                if ex.meta.sir_db.is_some() {
                    ex.meta.interferer_speaker = Some(corpus.utterances[v_utt].speaker.clone());
                }
                return Ok(ex);
            }
            Err(e @ MixError::ZeroEnergy(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnrollmentRequest {
    pub sensor: Sensor,
    /// `+inf` for clean enrollment, `-inf` for noise only.
    pub snr_db: f64,
    /// Restricts the candidate utterances to one split.
    pub split: Option<Split>,
}

impl EnrollmentRequest {
    pub fn clean(sensor: Sensor) -> Self {
        Self {
            sensor,
            snr_db: f64::INFINITY,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentSpec {
    pub sensor: Sensor,
    pub utterance: AudioBuffer,
    pub snr_db: f64,
    /// Id of the utterance the enrollment was taken from.
    pub source_id: String,
}

/// Enrollment from a uniformly chosen utterance of `speaker` other than
/// `exclude_id`, at the requested sensor and SNR.
pub fn sample_enrollment<R: Rng + ?Sized>(
    corpus: &Corpus,
    speaker: &str,
    exclude_id: &str,
    request: EnrollmentRequest,
    rng: &mut R,
) -> Result<EnrollmentSpec, MixError> {
    let candidates: Vec<usize> = corpus
        .utterances_of(speaker, request.split)
        .into_iter()
        .filter(|&i| corpus.utterances[i].id != exclude_id)
        .collect();
    let &idx = candidates
        .choose(rng)
        .ok_or_else(|| MixError::SingleUtterance(speaker.to_string()))?;
    let utt = &corpus.utterances[idx];
    let utterance = if request.snr_db == f64::INFINITY {
        utt.audio.get(request.sensor).clone()
    } else {
        let noise = draw_noise_clip(corpus, utt.audio.len(), rng)?;
        mix_enrollment(&utt.audio, &noise, request.sensor, request.snr_db)?
    };
    Ok(EnrollmentSpec {
        sensor: request.sensor,
        utterance,
        snr_db: request.snr_db,
        source_id: utt.id.clone(),
    })
}
