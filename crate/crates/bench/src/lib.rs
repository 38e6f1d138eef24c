//! Fixtures shared by the kernel benchmarks.

use std::sync::Arc;

use passe_core::autodiff::{clip_grad_norm, AdamState, Tape};
use passe_core::dsp::{NormStats, Stft};
use passe_core::model::{Model, ModelVars};
use passe_core::train::{example_loss, stft_config_for, PreparedExample};
use passe_core::{Arch, FtjnfConfig, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform noise in [-0.5, 0.5).
pub fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// One optimizer step of a tiny model on a fixed example.
pub struct TrainStep {
    pub model: Model<f32>,
    pub cfg: FtjnfConfig,
    pub stft: Arc<Stft>,
    pub example: PreparedExample,
    pub adam: AdamState<f32>,
}

impl TrainStep {
    pub fn new(arch: Arch, seconds: f64) -> Self {
        let cfg = FtjnfConfig::tiny(arch);
        let model = Model::<f32>::init(cfg, 7).expect("valid config");
        let stft = Arc::new(Stft::new(stft_config_for(cfg.bins)).expect("valid stft"));
        let n = (seconds * f64::from(SAMPLE_RATE)) as usize;
        let (y_o, y_i, s_o) = (noise(n, 1), noise(n, 2), noise(n, 3));
        let enroll = arch.personalized().then(|| noise(n, 4));
        let example = PreparedExample::new(
            &stft,
            &NormStats::identity(cfg.channels, cfg.bins),
            &y_o,
            (cfg.channels == 2).then_some(y_i.as_slice()),
            &s_o,
            enroll.as_deref(),
        )
        .expect("valid example");
        let adam = AdamState::new(&model.params, 1e-3);
        Self {
            model,
            cfg,
            stft,
            example,
            adam,
        }
    }

    /// Forward, backward, clipping and one Adam update; returns the loss.
    pub fn step(&mut self) -> f32 {
        let mut tape = Tape::<f32>::new();
        let vars = ModelVars::trainable(&self.model, &mut tape).expect("layout");
        let l = example_loss(&mut tape, &vars, &self.cfg, &self.stft, &self.example, 1.0).expect("loss");
        let grads = tape.backward(l).expect("backward");
        let mut g = self.model.params.collect_grads(&grads, &vars.all);
        clip_grad_norm(&mut g, 10.0);
        self.adam.update(&mut self.model.params, &g).expect("update");
        tape.value(l).data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_reduce_loss_on_a_fixed_example() {
        let mut s = TrainStep::new(Arch::AsSe, 0.25);
        let first = s.step();
        let mut last = first;
        for _ in 0..20 {
            last = s.step();
        }
        assert!(last.is_finite() && last < first, "{first} -> {last}");
    }
}
