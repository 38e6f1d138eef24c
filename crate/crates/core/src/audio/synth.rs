//! Synthetic two-sensor corpus: formant-filtered harmonic "speech" at the
//! outer microphone, a band-limited body-conduction version at the in-ear
//! microphone, broadband noise sources and an impulse-response set.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    write_manifest, write_wav, AudioBuffer, AudioError, IrSet, ManifestEntry, NoiseEntry,
    NoiseKind, Split, UtteranceEntry, WavFormat, SAMPLE_RATE,
};

const FS: f64 = SAMPLE_RATE as f64;

/// Vowel formants (F1, F2, F3) in Hz.
const VOWELS: [(f64, f64, f64); 5] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Utterance duration range in seconds.
    pub utt_duration_s: (f64, f64),
    pub noise_duration_s: f64,
    pub n_directions: usize,
    pub ir_len: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            utt_duration_s: (2.5, 4.0),
            noise_duration_s: 10.0,
            n_directions: 8,
            ir_len: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn lowpass(fc: f64, q: f64) -> Self {
        let w = 2.0 * PI * fc / FS;
        let alpha = w.sin() / (2.0 * q);
        let c = w.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn low_shelf(fc: f64, gain_db: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w = 2.0 * PI * fc / FS;
        let (c, s) = (w.cos(), w.sin());
        let alpha = s / 2.0 * 2f64.sqrt();
        let sa = 2.0 * a.sqrt() * alpha;
        let a0 = (a + 1.0) + (a - 1.0) * c + sa;
        Self {
            b: [
                a * ((a + 1.0) - (a - 1.0) * c + sa) / a0,
                2.0 * a * ((a - 1.0) - (a + 1.0) * c) / a0,
                a * ((a + 1.0) - (a - 1.0) * c - sa) / a0,
            ],
            a: [
                -2.0 * ((a - 1.0) + (a + 1.0) * c) / a0,
                ((a + 1.0) + (a - 1.0) * c - sa) / a0,
            ],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[0] * y1
                    - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// Fourth-order Butterworth low-pass as two cascaded sections.
fn butter4_lowpass(x: &[f64], fc: f64) -> Vec<f64> {
    let s1 = Biquad::lowpass(fc, 0.541_196_100_146_197);
    let s2 = Biquad::lowpass(fc, 1.306_562_964_876_376_6);
    s2.run(&s1.run(x))
}

/// Klatt-style two-pole resonator with unit DC gain.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bw: f64) {
        self.c = -(-2.0 * PI * bw / FS).exp();
        self.b = 2.0 * (-PI * bw / FS).exp() * (2.0 * PI * freq / FS).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[derive(Debug, Clone)]
struct Speaker {
    f0: f64,
    tract: f64,
    harmonic_slope: f64,
    shelf_db: f64,
    inear_gain: f64,
}

impl Speaker {
    fn draw(index: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let pos = index as f64 / (n.max(2) - 1) as f64;
        Self {
            f0: 95.0 * (250.0f64 / 95.0).powf(pos) * rng.random_range(0.95..1.05),
            tract: rng.random_range(0.85..1.15),
            harmonic_slope: rng.random_range(0.9..1.5),
            shelf_db: rng.random_range(2.0..10.0),
            inear_gain: rng.random_range(0.8..1.2),
        }
    }

    /// Returns the (outer, in-ear) pair for one utterance.
    fn utterance(&self, len: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; len];
        let mut res = [Resonator::default(); 4];
        let mut phase = 0.0f64;
        let mut pos = (rng.random_range(0.05..0.2) * FS) as usize;
        let ramp = (0.025 * FS) as usize;
        while pos + (0.15 * FS) as usize <= len {
            let syl = ((rng.random_range(0.12..0.30) * FS) as usize).min(len - pos);
            let (f1, f2, f3) = VOWELS[rng.random_range(0..VOWELS.len())];
            for (r, (f, bw)) in res.iter_mut().zip([
                (f1 * self.tract, 60.0),
                (f2 * self.tract, 90.0),
                (f3 * self.tract, 120.0),
                (3500.0 * self.tract, 200.0),
            ]) {
                r.tune(f, bw);
            }
            let glide = rng.random_range(-0.2..0.2);
            let vib_rate = rng.random_range(3.0..6.0);
            let level = rng.random_range(0.6..1.0);
            for n in 0..syl {
                let tn = n as f64 / syl as f64;
                let f0 = self.f0
                    * (1.0 + glide * tn)
                    * (1.0 + 0.02 * (2.0 * PI * vib_rate * n as f64 / FS).sin());
                phase = (phase + 2.0 * PI * f0 / FS) % (2.0 * PI);
                let env = if n < ramp {
                    0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
                } else if syl - n < ramp {
                    0.5 - 0.5 * (PI * (syl - n) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let k_max = (7800.0 / f0) as usize;
                let (rot_s, rot_c) = phase.sin_cos();
                let (mut s, mut c) = (rot_s, rot_c);
                let mut exc = 0.0;
                for k in 1..=k_max {
                    exc += s / (k as f64).powf(self.harmonic_slope);
                    let s_next = s * rot_c + c * rot_s;
                    c = c * rot_c - s * rot_s;
                    s = s_next;
                }
                let mut y = exc * env * level;
                for r in res.iter_mut() {
                    y = r.step(y);
                }
                out[pos + n] = y;
            }
            pos += syl + (rng.random_range(0.04..0.2) * FS) as usize;
        }
        let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        out.iter_mut().for_each(|x| *x *= 0.5 / peak);

        let lp = butter4_lowpass(&out, 2000.0);
        let mut inear = Biquad::low_shelf(500.0, self.shelf_db).run(&lp);
        inear.iter_mut().for_each(|x| *x *= self.inear_gain);
        let ipeak = inear.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if ipeak > 0.9 {
            inear.iter_mut().for_each(|x| *x *= 0.9 / ipeak);
        }
        (out, inear)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rms_normalize(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Paul Kellet's economy pink filter.
fn pink(white: &[f64]) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    white
        .iter()
        .map(|&w| {
            b0 = 0.99765 * b0 + w * 0.099_046_0;
            b1 = 0.96300 * b1 + w * 0.296_516_4;
            b2 = 0.57000 * b2 + w * 1.052_691_3;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn noise_source(kind: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| normal(rng)).collect();
    let mut x = match kind % 4 {
        0 => white,
        1 => pink(&white),
        2 => {
            let p = pink(&white);
            let (r1, r2) = (rng.random_range(2.0..5.0), rng.random_range(0.3..1.0));
            let ph = rng.random_range(0.0..2.0 * PI);
            p.iter()
                .enumerate()
                .map(|(n, v)| {
                    let t = n as f64 / FS;
                    v * (1.0 + 0.6 * (2.0 * PI * r1 * t + ph).sin())
                        * (1.0 + 0.3 * (2.0 * PI * r2 * t).sin())
                })
                .collect()
        }
        _ => {
            let base = rng.random_range(50.0..120.0);
            let lp = butter4_lowpass(&white, 3000.0);
            lp.iter()
                .enumerate()
                .map(|(n, v)| {
                    let t = n as f64 / FS;
                    let hum: f64 = (1..=5)
                        .map(|k| (2.0 * PI * base * k as f64 * t).sin() / k as f64)
                        .sum();
                    0.3 * v + hum
                })
                .collect()
        }
    };
    rms_normalize(&mut x, 0.1);
    x
}

/// In-ear responses are strongly attenuated and smoothed, modelling the
/// acoustic shielding of the occluded ear canal.
fn impulse_responses(
    direction: usize,
    n_dirs: usize,
    ir_len: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let theta = 2.0 * PI * direction as f64 / n_dirs as f64;
    let delay = 4 + (4.0 * (1.0 - theta.cos())).round() as usize;
    let mut outer = vec![0.0; ir_len];
    outer[delay] = 0.8 + 0.2 * theta.cos();
    let mut inear_sparse = vec![0.0; ir_len];
    inear_sparse[(delay + 3).min(ir_len - 1)] = 1.0;
    for _ in 0..10 {
        let d = rng.random_range(30..ir_len);
        outer[d] += rng.random_range(0.1..0.4)
            * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            * (-(d as f64) / 300.0).exp();
        let d = rng.random_range(30..ir_len);
        inear_sparse[d] += rng.random_range(0.1..0.4)
            * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            * (-(d as f64) / 300.0).exp();
    }
    let taps = 16;
    let kernel: Vec<f64> = (0..taps)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * (n as f64 + 0.5) / taps as f64).cos())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let gain = 0.04;
    let inear = (0..ir_len)
        .map(|n| {
            (0..taps.min(n + 1))
                .map(|k| kernel[k] * inear_sparse[n - k])
                .sum::<f64>()
                * gain
                / ksum
        })
        .collect();
    (outer, inear)
}

fn ensure_dir(path: &Path) -> Result<(), AudioError> {
    fs::create_dir_all(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_f32(dir: &Path, rel: &str, samples: Vec<f64>) -> Result<PathBuf, AudioError> {
    write_wav(&AudioBuffer::new(samples), dir.join(rel), WavFormat::Float32)?;
    Ok(PathBuf::from(rel))
}

/// Generates the default synthetic corpus. See [`synth_corpus_with`].
pub fn synth_corpus(
    n_speakers: usize,
    n_utts: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, AudioError> {
    synth_corpus_with(n_speakers, n_utts, seed, out_dir, &SynthOptions::default())
}

/// Writes a deterministic corpus under `out_dir` and returns the manifest path.
///
/// Per speaker, the last utterance goes to the test split and the one before
/// it to validation when the speaker has at least three utterances; all others
/// are training utterances.
pub fn synth_corpus_with(
    n_speakers: usize,
    n_utts: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
    opts: &SynthOptions,
) -> Result<PathBuf, AudioError> {
    if n_speakers < 2 {
        return Err(AudioError::TooFewSpeakers(n_speakers));
    }
    let out = out_dir.as_ref();
    for sub in ["speech", "noise", "irs"] {
        ensure_dir(&out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    for s in 0..n_speakers {
        let spk = Speaker::draw(s, n_speakers, &mut rng);
        let speaker = format!("spk{s:02}");
        for u in 0..n_utts {
            let (lo, hi) = opts.utt_duration_s;
            let len = (rng.random_range(lo..=hi) * FS) as usize;
            let (outer, inear) = spk.utterance(len, &mut rng);
            let id = format!("{speaker}_utt{u:02}");
            let split = match (n_utts >= 3, u) {
                (true, u) if u == n_utts - 1 => Split::Test,
                (true, u) if u == n_utts - 2 => Split::Val,
                _ => Split::Train,
            };
            entries.push(ManifestEntry::Utterance(UtteranceEntry {
                path_outer: write_f32(out, &format!("speech/{id}_outer.wav"), outer)?,
                path_inear: write_f32(out, &format!("speech/{id}_inear.wav"), inear)?,
                id,
                speaker: speaker.clone(),
                split,
                duration_s: len as f64 / FS,
            }));
        }
    }

    for d in 0..opts.n_directions {
        let (o, i) = impulse_responses(d, opts.n_directions, opts.ir_len, &mut rng);
        write_f32(out, &format!("irs/{}", IrSet::file_name(d, false)), o)?;
        write_f32(out, &format!("irs/{}", IrSet::file_name(d, true)), i)?;
    }

    let noise_len = (opts.noise_duration_s * FS) as usize;
    for k in 0..4 {
        let id = format!("noise{k:02}");
        let x = noise_source(k, noise_len, &mut rng);
        entries.push(ManifestEntry::Noise(NoiseEntry {
            kind: NoiseKind::MonoWithIrs {
                path: write_f32(out, &format!("noise/{id}.wav"), x)?,
                ir_set: PathBuf::from("irs"),
            },
            id,
        }));
    }
    let outer = noise_source(1, noise_len, &mut rng);
    let mut inear = butter4_lowpass(&outer, 2000.0);
    inear.iter_mut().for_each(|v| *v *= 0.05);
    entries.push(ManifestEntry::Noise(NoiseEntry {
        id: "paired00".into(),
        kind: NoiseKind::Paired {
            path_outer: write_f32(out, "noise/paired00_outer.wav", outer)?,
            path_inear: write_f32(out, "noise/paired00_inear.wav", inear)?,
        },
    }));

    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
