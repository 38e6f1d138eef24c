//! End-to-end checks across corpus synthesis, the model graph and evaluation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use passe_core::audio::{synth_corpus_with, Split, SynthOptions};
use passe_core::autodiff::{LstmParams, Tape, Tensor};
use passe_core::dsp::{NormStats, Stft};
use passe_core::metrics::{evaluate_set, EvalOptions, Identity, Oracle};
use passe_core::mixsim::{build_eval_set, load_eval_set, Condition, Corpus, EvalSetOptions};
use passe_core::model::{Model, ModelVars};
use passe_core::train::{example_loss, stft_config_for, PreparedExample};
use passe_core::{Arch, FtjnfConfig, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::RealFftPlanner;

fn small_opts() -> SynthOptions {
    SynthOptions {
        utt_duration_s: (1.0, 1.5),
        noise_duration_s: 3.0,
        n_directions: 2,
        ir_len: 256,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

#[test]
fn corpus_synthesis_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth_corpus_with(2, 1, 7, &a, &small_opts()).unwrap();
    synth_corpus_with(2, 1, 7, &b, &small_opts()).unwrap();
    let fa = files(&a);
    assert!(fa.len() > 4);
    assert_eq!(fa, files(&b));
}

/// Energy above 4 kHz from a Blackman-Harris STFT (512/256). The low
/// sidelobes matter here: the synthetic voice has little energy that high.
fn high_band_energy(x: &[f64]) -> f64 {
    let n = 512;
    let w: Vec<f64> = (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            0.35875 - 0.48829 * t.cos() + 0.14128 * (2.0 * t).cos() - 0.01168 * (3.0 * t).cos()
        })
        .collect();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let first = (4000 * n).div_ceil(SAMPLE_RATE as usize);
    let mut spec = fft.make_output_vec();
    let mut e = 0.0;
    for start in (0..=x.len().saturating_sub(n)).step_by(n / 2) {
        let mut frame: Vec<f64> = x[start..start + n].iter().zip(&w).map(|(a, b)| a * b).collect();
        fft.process(&mut frame, &mut spec).unwrap();
        e += spec[first..].iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    e
}

#[test]
fn in_ear_channel_is_band_limited() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_corpus_with(3, 3, 8, dir.path(), &small_opts()).unwrap();
    let corpus = Corpus::load(&manifest).unwrap();
    for u in &corpus.utterances {
        assert_eq!(u.audio.outer.len(), u.audio.inear.len());
        let (o, i) = (high_band_energy(&u.audio.outer.samples), high_band_energy(&u.audio.inear.samples));
        assert!(o > 0.0);
        assert!(i <= 0.01 * o, "{}: in-ear {i:e} vs outer {o:e} above 4 kHz", u.id);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = FtjnfConfig::tiny(Arch::PasSe);
    let model = Model::<f64>::init(cfg, 3).unwrap();
    let stft = Arc::new(Stft::new(stft_config_for(cfg.bins)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 4000;
    let (y_o, y_i, s_o) = (uniform(&mut rng, n, 1.0), uniform(&mut rng, n, 1.0), uniform(&mut rng, n, 0.5));
    let enroll = uniform(&mut rng, n, 1.0);
    let ex = PreparedExample::new(
        &stft,
        &NormStats::identity(cfg.channels, cfg.bins),
        &y_o,
        Some(&y_i),
        &s_o,
        Some(&enroll),
    )
    .unwrap();
    let mut tape = Tape::<f64>::new();
    let vars = ModelVars::trainable(&model, &mut tape).unwrap();
    let l = example_loss(&mut tape, &vars, &cfg, &stft, &ex, 1.0).unwrap();
    let grads = tape.backward(l).unwrap();
    let g = model.params.collect_grads(&grads, &vars.all);
    for (p, gp) in model.params.params.iter().zip(&g) {
        assert!(gp.iter().any(|v| *v != 0.0), "{} has no gradient", p.name);
        assert!(gp.iter().all(|v| v.is_finite()), "{}", p.name);
    }
    assert!(model.params.params.iter().any(|p| p.name.starts_with("spk.")));
    assert!(model.params.params.iter().any(|p| p.name.starts_with("cond.")));
}

#[test]
fn frequency_lstm_treats_frames_independently() {
    let (s, n, i, h) = (6, 4, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    let mut t = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let len = shape.iter().product();
        tape.constant(Tensor::new(shape, uniform(rng, len, 1.0)).unwrap())
    };
    let p = LstmParams {
        w_ih: t(&[4 * h, i], &mut rng),
        w_hh: t(&[4 * h, h], &mut rng),
        b_ih: t(&[4 * h], &mut rng),
        b_hh: t(&[4 * h], &mut rng),
    };
    let x = uniform(&mut rng, s * n * i, 1.0);
    let perm = [2, 0, 3, 1];
    let mut xp = vec![0.0; x.len()];
    for si in 0..s {
        for (to, &from) in perm.iter().enumerate() {
            let (dst, src) = ((si * n + to) * i, (si * n + from) * i);
            xp[dst..dst + i].copy_from_slice(&x[src..src + i]);
        }
    }
    let xv = tape.constant(Tensor::new(&[s, n, i], x).unwrap());
    let xpv = tape.constant(Tensor::new(&[s, n, i], xp).unwrap());
    let a = tape.lstm(xv, &p).unwrap();
    let b = tape.lstm(xpv, &p).unwrap();
    let (a, b) = (&tape.value(a).data, &tape.value(b).data);
    for si in 0..s {
        for (to, &from) in perm.iter().enumerate() {
            for k in 0..h {
                assert_eq!(b[(si * n + to) * h + k], a[(si * n + from) * h + k]);
            }
        }
    }
}

#[test]
fn evaluation_reference_systems_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_corpus_with(3, 3, 4, dir.path().join("c"), &small_opts()).unwrap();
    let corpus = Corpus::load(&manifest).unwrap();
    let opts = EvalSetOptions {
        repeats: 2,
        seed: 9,
        split: Split::Test,
        ..EvalSetOptions::default()
    };
    let meta = build_eval_set(&corpus, dir.path().join("eval"), &opts).unwrap();
    let items = load_eval_set(&meta).unwrap();
    let all = EvalOptions::default();

    let oracle = evaluate_set(&Oracle, &items, &all).unwrap();
    assert!(oracle.rows.iter().all(|r| r.si_sdr_db == f64::INFINITY));
    assert!(oracle.rows.iter().all(|r| (r.estoi - 1.0).abs() < 1e-9));

    let noisy = evaluate_set(&Identity, &items, &all).unwrap();
    let mixed: Vec<f64> = noisy
        .rows
        .iter()
        .filter(|r| r.condition == Condition::NV)
        .map(|r| r.si_sdr_db)
        .collect();
    assert!(!mixed.is_empty());
    assert!(mixed.iter().sum::<f64>() / (mixed.len() as f64) < 0.0);

    let mut reversed = items.clone();
    reversed.reverse();
    let back = evaluate_set(&Identity, &reversed, &all).unwrap();
    let ids: Vec<&str> = back.rows.iter().map(|r| r.id.as_str()).collect();
    let expected: Vec<&str> = reversed.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids, expected);
    let (a, b) = (noisy.aggregate(), back.aggregate());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.condition, x.items), (y.condition, y.items));
        assert!((x.si_sdr_db - y.si_sdr_db).abs() < 1e-9);
        assert!((x.estoi - y.estoi).abs() < 1e-12);
    }
}
