use realfft::RealFftPlanner;

use super::DspError;
use crate::audio::AudioBuffer;

/// Plain O(n·m) linear convolution truncated to `x.len()`.
pub fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            (0..h.len().min(n + 1))
                .map(|k| h[k] * x[n - k])
                .sum::<f64>()
        })
        .collect()
}

/// Linear convolution `x * h`, truncated to the length of `x`. Uses the FFT
/// for anything but tiny inputs.
pub fn convolve(x: &AudioBuffer, h: &AudioBuffer) -> Result<AudioBuffer, DspError> {
    if h.is_empty() {
        return Err(DspError::EmptyKernel);
    }
    if !x.is_finite() || !h.is_finite() {
        return Err(DspError::NonFinite);
    }
    if x.len() * h.len() <= 1 << 14 {
        return Ok(AudioBuffer::new(convolve_direct(&x.samples, &h.samples)));
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |sig: &[f64]| {
        let mut buf = fwd.make_input_vec();
        buf[..sig.len()].copy_from_slice(sig);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("planned sizes");
        out
    };
    let hx = spectrum(&x.samples);
    let hh = spectrum(&h.samples);
    let mut prod: Vec<_> = hx.iter().zip(&hh).map(|(a, b)| a * b).collect();
    let last = prod.len() - 1;
    prod[0].im = 0.0;
    prod[last].im = 0.0;
    let mut out = inv.make_output_vec();
    inv.process(&mut prod, &mut out).expect("planned sizes");
    let scale = 1.0 / n as f64;
    Ok(AudioBuffer {
        samples: out[..x.len()].iter().map(|v| v * scale).collect(),
        rate: x.rate,
    })
}
