use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::DspError;
use crate::audio::AudioBuffer;

/// Frame/hop/FFT sizes in samples. The window is always square-root Hann,
/// used for both analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    /// 32 ms frames, 16 ms shift at 16 kHz: 257 bins.
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn with_frame(frame_len: usize) -> Self {
        Self {
            frame_len,
            hop: frame_len / 2,
            fft_size: frame_len,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.frame_len < 2 || !self.frame_len.is_multiple_of(2) || self.hop * 2 != self.frame_len {
            return Err(DspError::Config(format!(
                "hop must be half of an even frame length (frame {}, hop {})",
                self.frame_len, self.hop
            )));
        }
        if self.fft_size < self.frame_len || !self.fft_size.is_multiple_of(2) {
            return Err(DspError::Config(format!(
                "fft size {} must be even and at least the frame length {}",
                self.fft_size, self.frame_len
            )));
        }
        Ok(())
    }

    /// Number of full frames in a signal of `len` samples (no padding).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the overlap-add output for `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    pub fn window(&self) -> Vec<f64> {
        (0..self.frame_len)
            .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / self.frame_len as f64).cos()).sqrt())
            .collect()
    }
}

/// Complex time-frequency data laid out `[frame][bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub data: Vec<Complex64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        Self {
            frames,
            bins: config.bins(),
            channels: 1,
            data: vec![Complex64::new(0.0, 0.0); frames * config.bins()],
            config,
        }
    }

    pub fn at(&self, frame: usize, bin: usize, channel: usize) -> Complex64 {
        self.data[(frame * self.bins + bin) * self.channels + channel]
    }

    /// Magnitudes `[frame][bin][channel]`.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Interleaves single-channel spectrograms of equal shape.
    pub fn stack(parts: &[Spectrogram]) -> Result<Self, DspError> {
        let first = parts
            .first()
            .ok_or_else(|| DspError::Shape("no channels to stack".into()))?;
        if parts
            .iter()
            .any(|p| p.channels != 1 || p.frames != first.frames || p.bins != first.bins)
        {
            return Err(DspError::Shape(
                "stacked spectrograms must be single-channel with equal shape".into(),
            ));
        }
        let channels = parts.len();
        let mut data = Vec::with_capacity(first.data.len() * channels);
        for i in 0..first.data.len() {
            data.extend(parts.iter().map(|p| p.data[i]));
        }
        Ok(Self {
            frames: first.frames,
            bins: first.bins,
            channels,
            data,
            config: first.config,
        })
    }

    pub fn channel(&self, c: usize) -> Self {
        Self {
            frames: self.frames,
            bins: self.bins,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
            config: self.config,
        }
    }
}

/// A planned STFT for one configuration. Also provides the adjoints of the
/// analysis and synthesis operators, which back-propagation needs.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: cfg.window(),
            fwd: planner.plan_fft_forward(cfg.fft_size),
            inv: planner.plan_fft_inverse(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Weighting of bin `k` in a one-sided inverse transform.
    fn bin_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.cfg.fft_size / 2 {
            1.0
        } else {
            2.0
        }
    }

    fn rfft(&self, frame: &mut [f64], out: &mut [Complex64]) {
        self.fwd
            .process(frame, out)
            .expect("buffer sizes come from the plan");
    }

    fn irfft(&self, spec: &mut [Complex64], out: &mut [f64]) {
        let last = spec.len() - 1;
        spec[0].im = 0.0;
        spec[last].im = 0.0;
        self.inv
            .process(spec, out)
            .expect("buffer sizes come from the plan");
    }

    pub fn forward(&self, x: &[f64]) -> Result<Spectrogram, DspError> {
        let cfg = &self.cfg;
        if x.len() < cfg.frame_len {
            return Err(DspError::TooShort {
                len: x.len(),
                frame_len: cfg.frame_len,
            });
        }
        let frames = cfg.frames_for(x.len());
        let bins = cfg.bins();
        let mut out = Spectrogram::zeros(frames, *cfg);
        let mut buf = self.fwd.make_input_vec();
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let seg = &x[t * cfg.hop..t * cfg.hop + cfg.frame_len];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = s * w;
            }
            self.rfft(&mut buf, &mut out.data[t * bins..(t + 1) * bins]);
        }
        Ok(out)
    }

    /// Weighted overlap-add synthesis of a single-channel spectrogram.
    pub fn inverse(&self, spec: &Spectrogram) -> Result<Vec<f64>, DspError> {
        self.check(spec)?;
        let cfg = &self.cfg;
        let bins = cfg.bins();
        let mut out = vec![0.0; cfg.signal_len(spec.frames)];
        let mut sbuf = self.inv.make_input_vec();
        let mut tbuf = self.inv.make_output_vec();
        let scale = 1.0 / cfg.fft_size as f64;
        for t in 0..spec.frames {
            sbuf.copy_from_slice(&spec.data[t * bins..(t + 1) * bins]);
            self.irfft(&mut sbuf, &mut tbuf);
            let seg = &mut out[t * cfg.hop..t * cfg.hop + cfg.frame_len];
            for ((o, v), w) in seg.iter_mut().zip(&tbuf).zip(&self.window) {
                *o += v * scale * w;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::forward`]: maps a gradient w.r.t. the real and
    /// imaginary parts of each coefficient to a gradient w.r.t. the signal.
    pub fn forward_adjoint(&self, grad: &Spectrogram, len: usize) -> Result<Vec<f64>, DspError> {
        self.check(grad)?;
        let cfg = &self.cfg;
        if cfg.frames_for(len) != grad.frames {
            return Err(DspError::Shape(format!(
                "{} frames do not match a signal of {len} samples",
                grad.frames
            )));
        }
        let bins = cfg.bins();
        let n = cfg.fft_size as f64;
        let mut out = vec![0.0; len];
        let mut sbuf = self.inv.make_input_vec();
        let mut tbuf = self.inv.make_output_vec();
        for t in 0..grad.frames {
            for (k, (s, g)) in sbuf
                .iter_mut()
                .zip(&grad.data[t * bins..(t + 1) * bins])
                .enumerate()
            {
                *s = g * (n / self.bin_weight(k));
            }
            self.irfft(&mut sbuf, &mut tbuf);
            let seg = &mut out[t * cfg.hop..t * cfg.hop + cfg.frame_len];
            for ((o, v), w) in seg.iter_mut().zip(&tbuf).zip(&self.window) {
                *o += v / n * w;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::inverse`] for a spectrogram with `frames` frames.
    pub fn inverse_adjoint(&self, grad: &[f64], frames: usize) -> Result<Spectrogram, DspError> {
        let cfg = &self.cfg;
        if grad.len() != cfg.signal_len(frames) {
            return Err(DspError::Shape(format!(
                "gradient of {} samples does not match {frames} frames",
                grad.len()
            )));
        }
        let bins = cfg.bins();
        let n = cfg.fft_size as f64;
        let mut out = Spectrogram::zeros(frames, *cfg);
        let mut buf = self.fwd.make_input_vec();
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let seg = &grad[t * cfg.hop..t * cfg.hop + cfg.frame_len];
            for ((b, g), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = g * w;
            }
            let row = &mut out.data[t * bins..(t + 1) * bins];
            self.rfft(&mut buf, row);
            for (k, c) in row.iter_mut().enumerate() {
                *c *= self.bin_weight(k) / n;
                if k == 0 || k == bins - 1 {
                    c.im = 0.0;
                }
            }
        }
        Ok(out)
    }

    fn check(&self, spec: &Spectrogram) -> Result<(), DspError> {
        if spec.channels != 1 || spec.bins != self.cfg.bins() {
            return Err(DspError::Shape(format!(
                "expected a single-channel spectrogram with {} bins, got {} bins x {} channels",
                self.cfg.bins(),
                spec.bins,
                spec.channels
            )));
        }
        if spec.data.len() != spec.frames * spec.bins {
            return Err(DspError::Shape("spectrogram data length".into()));
        }
        Ok(())
    }
}

/// Single-channel STFT without center padding.
pub fn stft(x: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram, DspError> {
    Stft::new(*cfg)?.forward(&x.samples)
}

/// Inverse STFT; output length is `(frames - 1) * hop + frame_len`.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer, DspError> {
    Ok(AudioBuffer::new(Stft::new(spec.config)?.inverse(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_and_bin_counts() {
        let s = stft(&AudioBuffer::zeros(48_000), &StftConfig::default()).unwrap();
        assert_eq!((s.frames, s.bins), (186, 257));
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        assert_eq!(
            stft(&AudioBuffer::zeros(100), &StftConfig::default()),
            Err(DspError::TooShort {
                len: 100,
                frame_len: 512
            })
        );
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let s = stft(&AudioBuffer::new(x), &StftConfig::default()).unwrap();
        for t in 1..s.frames - 1 {
            let argmax = (0..s.bins)
                .max_by(|&a, &b| s.at(t, a, 0).norm().total_cmp(&s.at(t, b, 0).norm()))
                .unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn interior_reconstruction() {
        let cfg = StftConfig::default();
        let x = random(48_000, 1);
        let plan = Stft::new(cfg).unwrap();
        let y = plan.inverse(&plan.forward(&x).unwrap()).unwrap();
        assert_eq!(y.len(), cfg.signal_len(186));
        let (lo, hi) = (cfg.frame_len, y.len() - cfg.frame_len);
        let err: f64 = (lo..hi).map(|i| (x[i] - y[i]).powi(2)).sum();
        let norm: f64 = (lo..hi).map(|i| x[i].powi(2)).sum();
        assert!((err / norm).sqrt() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let spec = Spectrogram::zeros(10, StftConfig::default());
        assert!(istft(&spec).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_within_one_percent() {
        let cfg = StftConfig::default();
        let plan = Stft::new(cfg).unwrap();
        for seed in 0..5 {
            let x = random(48_000, seed);
            let s = plan.forward(&x).unwrap();
            let mut e = 0.0;
            for t in 0..s.frames {
                for k in 0..s.bins {
                    e += plan.bin_weight(k) * s.at(t, k, 0).norm_sqr();
                }
            }
            e /= cfg.fft_size as f64;
            let ex: f64 = x.iter().map(|v| v * v).sum();
            assert!((e / ex - 1.0).abs() < 0.01, "ratio {}", e / ex);
        }
    }

    #[test]
    fn stft_is_linear() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        let (x, y) = (random(4000, 2), random(4000, 3));
        let (a, b) = (0.7, -1.3);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sz) = (
            plan.forward(&x).unwrap(),
            plan.forward(&y).unwrap(),
            plan.forward(&z).unwrap(),
        );
        for i in 0..sz.data.len() {
            assert!((sz.data[i] - (sx.data[i] * a + sy.data[i] * b)).norm() < 1e-10);
        }
    }

    #[test]
    fn istft_is_linear() {
        let plan = Stft::new(StftConfig::default()).unwrap();
        let s1 = plan.forward(&random(4000, 4)).unwrap();
        let s2 = plan.forward(&random(4000, 5)).unwrap();
        let mut s12 = s1.clone();
        for (a, b) in s12.data.iter_mut().zip(&s2.data) {
            *a += b;
        }
        let (y1, y2, y12) = (
            plan.inverse(&s1).unwrap(),
            plan.inverse(&s2).unwrap(),
            plan.inverse(&s12).unwrap(),
        );
        for i in 0..y12.len() {
            assert!((y12[i] - y1[i] - y2[i]).abs() < 1e-10);
        }
    }

    fn real_dot(a: &Spectrogram, b: &Spectrogram) -> f64 {
        a.data.iter().zip(&b.data).map(|(p, q)| p.re * q.re + p.im * q.im).sum()
    }

    fn random_spec(frames: usize, cfg: StftConfig, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Spectrogram::zeros(frames, cfg);
        for c in s.data.iter_mut() {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        s
    }

    // <A x, y> == <x, A^T y> for both linear operators.
    #[test]
    fn adjoints_pass_dot_product_test() {
        let cfg = StftConfig::with_frame(16);
        let plan = Stft::new(cfg).unwrap();
        let len = 100;
        let frames = cfg.frames_for(len);
        let x = random(len, 7);
        let g = random_spec(frames, cfg, 8);
        let lhs = real_dot(&plan.forward(&x).unwrap(), &g);
        let rhs: f64 = x
            .iter()
            .zip(plan.forward_adjoint(&g, len).unwrap())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        let mut s = random_spec(frames, cfg, 9);
        for t in 0..frames {
            s.data[t * s.bins].im = 0.0;
            s.data[t * s.bins + s.bins - 1].im = 0.0;
        }
        let y = random(cfg.signal_len(frames), 10);
        let lhs: f64 = plan
            .inverse(&s)
            .unwrap()
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let rhs = real_dot(&s, &plan.inverse_adjoint(&y, frames).unwrap());
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
