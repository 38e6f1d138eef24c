//! Inputs, mask application and the combined time/magnitude L1 loss as tape
//! operations.

use std::sync::Arc;

use num_complex::Complex64;

use crate::audio::AudioBuffer;
use crate::autodiff::{CustomOp, Scalar, Tape, Tensor, Var};
use crate::dsp::{apply_norm, DspError, MagTensor, NormStats, Spectrogram, Stft, StftConfig};
use crate::model::{ftjnf_mask, speaker_embedding, FtjnfConfig, ModelError, ModelVars};

/// STFT whose one-sided spectrum has `bins` bins, with 50 % overlap.
pub fn stft_config_for(bins: usize) -> StftConfig {
    StftConfig::with_frame(2 * (bins.max(2) - 1))
}

/// Outer-mixture spectrogram and normalized magnitude features `[T, F, C]`
/// (outer first, then in-ear when given).
pub fn features(
    stft: &Stft,
    norm: &NormStats,
    y_o: &[f64],
    y_i: Option<&[f64]>,
) -> Result<(Spectrogram, MagTensor), DspError> {
    let outer = stft.forward(y_o)?;
    let mut parts = vec![outer.clone()];
    if let Some(y_i) = y_i {
        if y_i.len() != y_o.len() {
            return Err(DspError::Shape(format!(
                "outer has {} samples, in-ear has {}",
                y_o.len(),
                y_i.len()
            )));
        }
        parts.push(stft.forward(y_i)?);
    }
    let stacked = Spectrogram::stack(&parts)?;
    let mag = MagTensor {
        frames: stacked.frames,
        bins: stacked.bins,
        channels: stacked.channels,
        data: stacked.magnitudes(),
    };
    Ok((outer, apply_norm(&mag, norm)?))
}

/// `L = mean|ŝ - s| + λ·mean||STFT ŝ| - |STFT s||` evaluated directly.
pub fn loss_combined(
    s_hat: &AudioBuffer,
    s_ref: &AudioBuffer,
    cfg: &StftConfig,
    lambda: f64,
) -> Result<f64, DspError> {
    if s_hat.len() != s_ref.len() {
        return Err(DspError::Shape(format!(
            "estimate has {} samples, reference has {}",
            s_hat.len(),
            s_ref.len()
        )));
    }
    let n = s_hat.len().max(1) as f64;
    let time = s_hat
        .samples
        .iter()
        .zip(&s_ref.samples)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let stft = Stft::new(*cfg)?;
    let a = stft.forward(&s_hat.samples)?.magnitudes();
    let b = stft.forward(&s_ref.samples)?.magnitudes();
    let mag = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(time + lambda * mag)
}

/// `ISTFT(M ⊙ Y)` for a fixed mixture spectrogram `Y`; input is the mask `[T, F]`.
struct MaskedIstft {
    stft: Arc<Stft>,
    y: Spectrogram,
}

impl<T: Scalar> CustomOp<T> for MaskedIstft {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let gs = self
            .stft
            .inverse_adjoint(&g, self.y.frames)
            .expect("gradient matches the forward output");
        let dm = gs
            .data
            .iter()
            .zip(&self.y.data)
            .map(|(a, y)| T::from_f64(a.re * y.re + a.im * y.im))
            .collect();
        vec![Some(dm)]
    }
}

/// `|STFT(x)|` flattened `[T·F]`; input is a signal `[L]`.
struct StftMagnitude {
    stft: Arc<Stft>,
    spec: Spectrogram,
    len: usize,
}

impl<T: Scalar> CustomOp<T> for StftMagnitude {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gs = self.spec.clone();
        for (c, g) in gs.data.iter_mut().zip(grad) {
            let m = c.norm();
            *c = if m > 0.0 {
                *c * (g.as_f64() / m)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let dx = self
            .stft
            .forward_adjoint(&gs, self.len)
            .expect("gradient matches the forward output");
        vec![Some(dx.into_iter().map(T::from_f64).collect())]
    }
}

/// Applies `mask` `[T, F]` to the mixture spectrogram and resynthesizes.
pub fn masked_istft<T: Scalar>(
    tape: &mut Tape<T>,
    stft: &Arc<Stft>,
    mask: Var,
    y: &Spectrogram,
) -> Result<Var, ModelError> {
    let m = tape.value(mask);
    if m.numel() != y.frames * y.bins || y.channels != 1 {
        return Err(ModelError::Input(format!(
            "mask {:?} vs spectrogram {}x{}x{}",
            m.shape, y.frames, y.bins, y.channels
        )));
    }
    let mut masked = y.clone();
    for (c, &mv) in masked.data.iter_mut().zip(&m.data) {
        *c *= mv.as_f64();
    }
    let out = stft.inverse(&masked)?;
    let n = out.len();
    let t = Tensor::from_f64(&[n], &out)?;
    Ok(tape.custom(
        &[mask],
        t,
        Box::new(MaskedIstft {
            stft: Arc::clone(stft),
            y: y.clone(),
        }),
    ))
}

/// STFT magnitudes of the signal `x` `[L]`, flattened `[T·F]`.
pub fn stft_magnitude<T: Scalar>(
    tape: &mut Tape<T>,
    stft: &Arc<Stft>,
    x: Var,
) -> Result<Var, ModelError> {
    let xs = tape.value(x).to_f64();
    let spec = stft.forward(&xs)?;
    let mags = spec.magnitudes();
    let t = Tensor::from_f64(&[mags.len()], &mags)?;
    Ok(tape.custom(
        &[x],
        t,
        Box::new(StftMagnitude {
            stft: Arc::clone(stft),
            spec,
            len: xs.len(),
        }),
    ))
}

/// One training example reduced to what the loss needs.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub mixture: Spectrogram,
    pub features: MagTensor,
    /// Clean outer target cut to the resynthesis length.
    pub target: Vec<f64>,
    pub target_mag: Vec<f64>,
    pub enroll: Option<Vec<f64>>,
}

impl PreparedExample {
    pub fn new(
        stft: &Stft,
        norm: &NormStats,
        y_o: &[f64],
        y_i: Option<&[f64]>,
        s_o: &[f64],
        enroll: Option<&[f64]>,
    ) -> Result<Self, DspError> {
        let (mixture, features) = features(stft, norm, y_o, y_i)?;
        let len = stft.config().signal_len(mixture.frames);
        if s_o.len() < len {
            return Err(DspError::Shape(format!(
                "target has {} samples, need {len}",
                s_o.len()
            )));
        }
        let target = s_o[..len].to_vec();
        let target_mag = stft.forward(&target)?.magnitudes();
        Ok(Self {
            mixture,
            features,
            target,
            target_mag,
            enroll: enroll.map(<[f64]>::to_vec),
        })
    }
}

/// Combined loss of one example on `tape`; returns the scalar loss node.
pub fn example_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &FtjnfConfig,
    stft: &Arc<Stft>,
    ex: &PreparedExample,
    lambda: f64,
) -> Result<Var, ModelError> {
    let e = match &ex.enroll {
        Some(enroll) if cfg.personalized() => Some(speaker_embedding(tape, vars, cfg, enroll)?),
        Some(_) => return Err(ModelError::UnexpectedEmbedding),
        None if cfg.personalized() => return Err(ModelError::MissingEmbedding),
        None => None,
    };
    let mask = ftjnf_mask(tape, vars, cfg, &ex.features, e)?;
    let s_hat = masked_istft(tape, stft, mask, &ex.mixture)?;
    let target: Vec<T> = ex.target.iter().map(|&v| T::from_f64(v)).collect();
    let time = tape.l1_to(s_hat, &target)?;
    let mag = stft_magnitude(tape, stft, s_hat)?;
    let target_mag: Vec<T> = ex.target_mag.iter().map(|&v| T::from_f64(v)).collect();
    let mag = tape.l1_to(mag, &target_mag)?;
    let mag = tape.scale(mag, T::from_f64(lambda));
    Ok(tape.add(time, mag)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn loss_of_perfect_estimate_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = AudioBuffer::new(random(&mut rng, 400));
        assert_eq!(loss_combined(&s, &s, &StftConfig::with_frame(32), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_against_silence_is_mean_abs_plus_mean_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = StftConfig::with_frame(32);
        let s = AudioBuffer::new(random(&mut rng, 400));
        let m = s.samples.iter().map(|v| v.abs()).sum::<f64>() / 400.0;
        let mags = Stft::new(cfg).unwrap().forward(&s.samples).unwrap().magnitudes();
        let mu = mags.iter().sum::<f64>() / mags.len() as f64;
        let l = loss_combined(&AudioBuffer::zeros(400), &s, &cfg, 1.0).unwrap();
        assert!((l - (m + mu)).abs() < 1e-12);
        let swapped = loss_combined(&s, &AudioBuffer::zeros(400), &cfg, 1.0).unwrap();
        assert!((swapped - l).abs() < 1e-12);
    }

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: &[f64]) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[x0.len()], x0.to_vec()).unwrap());
        let y = build(&mut tape, x);
        let g = tape.backward(y).unwrap().get(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xs = x0.to_vec();
                xs[i] += d;
                let mut t = Tape::new();
                let xv = t.param(Tensor::new(&[xs.len()], xs).unwrap());
                let yv = build(&mut t, xv);
                t.value(yv).data[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn masked_istft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stft = Arc::new(Stft::new(StftConfig::with_frame(16)).unwrap());
        let y = stft.forward(&random(&mut rng, 56)).unwrap();
        let w = random(&mut rng, 56);
        let m0 = random(&mut rng, y.frames * y.bins);
        fd_check(
            |tape, m| {
                let s = masked_istft(tape, &stft, m, &y).unwrap();
                let wv = tape.constant(Tensor::new(&[56], w.clone()).unwrap());
                let p = tape.mul(s, wv).unwrap();
                tape.sum(p)
            },
            &m0,
        );
    }

    #[test]
    fn stft_magnitude_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stft = Arc::new(Stft::new(StftConfig::with_frame(16)).unwrap());
        let x0 = random(&mut rng, 40);
        let frames = stft.config().frames_for(40);
        let w = random(&mut rng, frames * 9);
        fd_check(
            |tape, x| {
                let m = stft_magnitude(tape, &stft, x).unwrap();
                let wv = tape.constant(Tensor::new(&[w.len()], w.clone()).unwrap());
                let p = tape.mul(m, wv).unwrap();
                tape.sum(p)
            },
            &x0,
        );
    }

    #[test]
    fn unit_mask_reproduces_the_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stft = Arc::new(Stft::new(StftConfig::with_frame(32)).unwrap());
        let x = random(&mut rng, 16 * 20 + 16);
        let y = stft.forward(&x).unwrap();
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(&[y.frames, y.bins], vec![1.0; y.frames * y.bins]).unwrap());
        let s = masked_istft(&mut tape, &stft, m, &y).unwrap();
        let out = &tape.value(s).data;
        // Interior samples are covered by two frames and reconstruct exactly.
        for i in 16..out.len() - 16 {
            assert!((out[i] - x[i]).abs() < 1e-12);
        }
    }
}
