use serde::{Deserialize, Serialize};

use super::{DspError, Stft, StftConfig};
use crate::audio::AudioBuffer;

const STD_FLOOR: f64 = 1e-8;

/// Per-channel, per-bin mean and standard deviation of STFT magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// `mean[channel][bin]`
    pub mean: Vec<Vec<f64>>,
    /// `std[channel][bin]`, floored at 1e-8.
    pub std: Vec<Vec<f64>>,
}

impl NormStats {
    pub fn identity(channels: usize, bins: usize) -> Self {
        Self {
            mean: vec![vec![0.0; bins]; channels],
            std: vec![vec![1.0; bins]; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn bins(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }
}

/// Streaming (Welford) accumulator over magnitude frames.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    count: Vec<u64>,
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl NormAccumulator {
    pub fn new(channels: usize, bins: usize) -> Self {
        Self {
            count: vec![0; channels],
            mean: vec![vec![0.0; bins]; channels],
            m2: vec![vec![0.0; bins]; channels],
        }
    }

    /// Adds one frame of magnitudes for `channel`.
    pub fn push_frame(&mut self, channel: usize, mags: &[f64]) {
        self.count[channel] += 1;
        let n = self.count[channel] as f64;
        for ((m, s), &x) in self.mean[channel]
            .iter_mut()
            .zip(self.m2[channel].iter_mut())
            .zip(mags)
        {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn finish(self) -> Result<NormStats, DspError> {
        if self.count.contains(&0) {
            return Err(DspError::EmptyInput);
        }
        let std = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, &c)| {
                m2.iter()
                    .map(|v| (v / c as f64).sqrt().max(STD_FLOOR))
                    .collect()
            })
            .collect();
        Ok(NormStats {
            mean: self.mean,
            std,
        })
    }
}

/// Single streaming pass over utterances; each item holds one buffer per
/// channel (e.g. `[outer, in-ear]`).
pub fn compute_norm_stats<I>(clean: I, cfg: &StftConfig) -> Result<NormStats, DspError>
where
    I: IntoIterator<Item = Vec<AudioBuffer>>,
{
    let plan = Stft::new(*cfg)?;
    let mut acc: Option<NormAccumulator> = None;
    for channels in clean {
        let acc = acc.get_or_insert_with(|| NormAccumulator::new(channels.len(), cfg.bins()));
        if channels.len() != acc.count.len() {
            return Err(DspError::Shape(format!(
                "expected {} channels, got {}",
                acc.count.len(),
                channels.len()
            )));
        }
        for (c, buf) in channels.iter().enumerate() {
            let spec = plan.forward(&buf.samples)?;
            let mags = spec.magnitudes();
            for frame in mags.chunks(spec.bins) {
                acc.push_frame(c, frame);
            }
        }
    }
    acc.ok_or(DspError::EmptyInput)?.finish()
}

/// Real tensor `[frame][bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagTensor {
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl MagTensor {
    pub fn at(&self, t: usize, f: usize, c: usize) -> f64 {
        self.data[(t * self.bins + f) * self.channels + c]
    }
}

fn check(mag: &MagTensor, stats: &NormStats) -> Result<(), DspError> {
    if mag.channels != stats.channels()
        || mag.bins != stats.bins()
        || mag.data.len() != mag.frames * mag.bins * mag.channels
    {
        return Err(DspError::Shape(format!(
            "magnitudes {}x{}x{} vs statistics {} bins x {} channels",
            mag.frames,
            mag.bins,
            mag.channels,
            stats.bins(),
            stats.channels()
        )));
    }
    Ok(())
}

/// `(mag - mean) / std` per bin and channel.
pub fn apply_norm(mag: &MagTensor, stats: &NormStats) -> Result<MagTensor, DspError> {
    check(mag, stats)?;
    let mut out = mag.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % mag.channels;
        let f = (i / mag.channels) % mag.bins;
        *v = (*v - stats.mean[c][f]) / stats.std[c][f];
    }
    Ok(out)
}

pub fn invert_norm(norm: &MagTensor, stats: &NormStats) -> Result<MagTensor, DspError> {
    check(norm, stats)?;
    let mut out = norm.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % norm.channels;
        let f = (i / norm.channels) % norm.bins;
        *v = *v * stats.std[c][f] + stats.mean[c][f];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_buf(len: usize, rng: &mut ChaCha8Rng) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn constant_magnitudes_floor_std() {
        let mut acc = NormAccumulator::new(1, 3);
        for _ in 0..10 {
            acc.push_frame(0, &[0.5, 0.5, 0.5]);
        }
        let s = acc.finish().unwrap();
        assert_eq!(s.mean[0], vec![0.5; 3]);
        assert_eq!(s.std[0], vec![1e-8; 3]);
    }

    #[test]
    fn empty_input_errors() {
        let none: Vec<Vec<AudioBuffer>> = vec![];
        assert_eq!(
            compute_norm_stats(none, &StftConfig::default()),
            Err(DspError::EmptyInput)
        );
    }

    #[test]
    fn matches_two_pass_oracle_and_is_order_invariant() {
        let cfg = StftConfig::with_frame(32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let utts: Vec<Vec<AudioBuffer>> = (0..4)
            .map(|i| vec![random_buf(300 + 50 * i, &mut rng), random_buf(300 + 50 * i, &mut rng)])
            .collect();
        let stats = compute_norm_stats(utts.clone(), &cfg).unwrap();

        // two-pass oracle over all frames
        let plan = Stft::new(cfg).unwrap();
        for c in 0..2 {
            let frames: Vec<Vec<f64>> = utts
                .iter()
                .flat_map(|u| {
                    let s = plan.forward(&u[c].samples).unwrap();
                    s.magnitudes().chunks(s.bins).map(<[f64]>::to_vec).collect::<Vec<_>>()
                })
                .collect();
            let n = frames.len() as f64;
            for f in 0..cfg.bins() {
                let mean = frames.iter().map(|fr| fr[f]).sum::<f64>() / n;
                let var = frames.iter().map(|fr| (fr[f] - mean).powi(2)).sum::<f64>() / n;
                assert!((stats.mean[c][f] - mean).abs() < 1e-10);
                assert!((stats.std[c][f] - var.sqrt()).abs() < 1e-10);
            }
        }

        let mut shuffled = utts;
        shuffled.shuffle(&mut rng);
        let s2 = compute_norm_stats(shuffled, &cfg).unwrap();
        for c in 0..2 {
            for f in 0..cfg.bins() {
                assert!((stats.mean[c][f] - s2.mean[c][f]).abs() < 1e-12);
                assert!((stats.std[c][f] - s2.std[c][f]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_norm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = NormStats {
            mean: vec![vec![0.3, 0.1, 2.0], vec![1.0, 0.0, 0.5]],
            std: vec![vec![0.5, 2.0, 1.0], vec![0.25, 1.0, 3.0]],
        };
        let mag = MagTensor {
            frames: 4,
            bins: 3,
            channels: 2,
            data: (0..24).map(|_| rng.random_range(0.0..3.0)).collect(),
        };
        let out = apply_norm(&mag, &stats).unwrap();
        for t in 0..4 {
            for f in 0..3 {
                for c in 0..2 {
                    let want = (mag.at(t, f, c) - stats.mean[c][f]) / stats.std[c][f];
                    assert!((out.at(t, f, c) - want).abs() < 1e-15);
                }
            }
        }
        let back = invert_norm(&out, &stats).unwrap();
        for (a, b) in back.data.iter().zip(&mag.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let identity = NormStats::identity(2, 3);
        assert_eq!(apply_norm(&mag, &identity).unwrap(), mag);

        let at_mean = MagTensor {
            frames: 1,
            bins: 3,
            channels: 2,
            data: vec![0.3, 1.0, 0.1, 0.0, 2.0, 0.5],
        };
        assert!(apply_norm(&at_mean, &stats).unwrap().data.iter().all(|&v| v == 0.0));

        let wrong = MagTensor {
            frames: 1,
            bins: 2,
            channels: 2,
            data: vec![0.0; 4],
        };
        assert!(matches!(apply_norm(&wrong, &stats), Err(DspError::Shape(_))));
    }
}
