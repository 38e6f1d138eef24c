//! Extended short-time objective intelligibility.
//!
//! Both signals are resampled to 10 kHz, frames more than 40 dB below the
//! loudest reference frame are dropped from both, and one-third-octave band
//! envelopes are compared over sliding 30-frame segments after row and
//! column normalization.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::RealFftPlanner;

use super::MetricError;
use crate::audio::AudioBuffer;

const FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 5.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Rational-rate polyphase resampler with a Kaiser-windowed sinc low-pass.
/// The cutoff sits at 0.45 times the lower of the two rates and the filter
/// has 64 taps per phase (plus one for symmetry). Output is aligned with the
/// input (zero group delay) and has `ceil(len · to / from)` samples.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(u64::from(from), u64::from(to));
    let up = (u64::from(to) / g) as usize;
    let down = (u64::from(from) / g) as usize;
    let taps = TAPS_PER_PHASE * up.max(down) + 1;
    let half = (taps - 1) / 2;
    // Cutoff relative to the upsampled rate.
    let fc = 0.45 * f64::from(from.min(to)) / (f64::from(from) * up as f64);
    let i0b = bessel_i0(KAISER_BETA);
    let h: Vec<f64> = (0..taps)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let r = t / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            up as f64 * sinc * w
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|m| {
            // Output m sits at upsampled index m·down; only every `up`-th
            // upsampled sample is nonzero.
            let center = (m * down + half) as isize;
            let first = (center - (taps as isize - 1)).max(0);
            let mut start = first + ((up as isize - first.rem_euclid(up as isize)) % up as isize);
            let mut acc = 0.0;
            while start <= center {
                let n = (start / up as isize) as usize;
                if n >= x.len() {
                    break;
                }
                acc += h[(center - start) as usize] * x[n];
                start += up as isize;
            }
            acc
        })
        .collect()
}

/// Hann window without its zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Drops frames of both signals whose reference energy is more than
/// `DYN_RANGE_DB` below the loudest reference frame, then overlap-adds the
/// kept windowed frames back into signals.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann_inner(FRAME);
    if x.len() < FRAME {
        return (Vec::new(), Vec::new());
    }
    let starts: Vec<usize> = (0..=x.len() - FRAME).step_by(HOP).collect();
    let frame = |s: &[f64], i: usize| -> Vec<f64> {
        s[i..i + FRAME].iter().zip(&w).map(|(a, b)| a * b).collect()
    };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| {
            let e = frame(x, i).iter().map(|v| v * v).sum::<f64>().sqrt();
            20.0 * (e + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|&(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    let ola = |s: &[f64]| {
        if kept.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (kept.len() - 1) * HOP + FRAME];
        for (k, &i) in kept.iter().enumerate() {
            for (o, v) in out[k * HOP..k * HOP + FRAME].iter_mut().zip(frame(s, i)) {
                *o += v;
            }
        }
        out
    };
    (ola(x), ola(y))
}

/// Band-summing matrix as row ranges `[lo, hi)` of FFT bins per band.
pub(crate) fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * f64::from(FS) / NFFT as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, &fi) in f.iter().enumerate() {
            if (fi - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[frames][BANDS]`. Frames start every `HOP` samples while
/// a full frame plus at least one sample fits.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)], fft: &Arc<dyn realfft::RealToComplex<f64>>) -> Vec<[f64; BANDS]> {
    let w = hann_inner(FRAME);
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let mut out = Vec::new();
    let mut i = 0;
    while i + FRAME < x.len() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (b, (a, wv)) in buf.iter_mut().zip(x[i..i + FRAME].iter().zip(&w)) {
            *b = a * wv;
        }
        fft.process(&mut buf, &mut spec).expect("fft sizes match");
        let mut env = [0.0; BANDS];
        for (e, &(lo, hi)) in env.iter_mut().zip(bands) {
            *e = spec[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        }
        out.push(env);
        i += HOP;
    }
    out
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Segment `[BANDS][SEGMENT]` normalized along frames per band, then along
/// bands per frame.
fn normalized_segment(env: &[[f64; BANDS]]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..BANDS)
        .map(|b| env.iter().map(|f| f[b]).collect())
        .collect();
    rows.iter_mut().for_each(|r| normalize(r));
    for t in 0..env.len() {
        let mut col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
        normalize(&mut col);
        for (r, v) in rows.iter_mut().zip(col) {
            r[t] = v;
        }
    }
    rows
}

/// ESTOI of `est` against `reference`; both at the same rate.
pub fn estoi(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64, MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    if est.rate != reference.rate {
        return Err(MetricError::RateMismatch(est.rate, reference.rate));
    }
    let x = resample(&reference.samples, reference.rate, FS);
    let y = resample(&est.samples, est.rate, FS);
    let (x, y) = remove_silent_frames(&x, &y);
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(NFFT);
    let bands = third_octave_bands();
    let xe = band_envelopes(&x, &bands, &fft);
    let ye = band_envelopes(&y, &bands, &fft);
    if xe.len() < SEGMENT {
        return Err(MetricError::TooShort {
            frames: xe.len(),
            needed: SEGMENT,
        });
    }
    let segments = xe.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        let xs = normalized_segment(&xe[m..m + SEGMENT]);
        let ys = normalized_segment(&ye[m..m + SEGMENT]);
        let dot: f64 = xs
            .iter()
            .zip(&ys)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q))
            .sum();
        total += dot / SEGMENT as f64;
    }
    Ok(total / segments as f64)
}
