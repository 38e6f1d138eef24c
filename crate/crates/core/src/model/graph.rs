//! Builds the FT-JNF and speaker-encoder computations on a tape.

use super::{FtjnfConfig, Model, ModelError};
use crate::autodiff::{LstmParams, Scalar, Tape, Tensor, Var};
use crate::dsp::MagTensor;

/// Tape handles of the speaker-encoder weights.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub fb: (Var, Var),
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub conv3: (Var, Var),
    pub prelu1: Var,
    pub prelu2: Var,
}

/// Tape handles of every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub flstm: LstmParams,
    pub tlstm: LstmParams,
    pub out: (Var, Var),
    pub cond: Option<(Var, Var)>,
    pub spk: Option<EncoderVars>,
    /// All handles in parameter-set order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Places the weights on `tape`, trainable or frozen.
    pub fn bind<T: Scalar>(
        model: &Model<T>,
        tape: &mut Tape<T>,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        model.check_layout()?;
        let all: Vec<Var> = model
            .params
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let names: Vec<&str> = model.params.params.iter().map(|p| p.name.as_str()).collect();
        let get = |n: &str| all[names.iter().position(|&x| x == n).expect("layout checked")];
        let lstm = |prefix: &str| LstmParams {
            w_ih: get(&format!("{prefix}.w_ih")),
            w_hh: get(&format!("{prefix}.w_hh")),
            b_ih: get(&format!("{prefix}.b_ih")),
            b_hh: get(&format!("{prefix}.b_hh")),
        };
        let pair = |n: &str| (get(&format!("{n}.weight")), get(&format!("{n}.bias")));
        let personalized = model.config.personalized();
        Ok(Self {
            flstm: lstm("flstm"),
            tlstm: lstm("tlstm"),
            out: pair("out"),
            cond: personalized.then(|| pair("cond")),
            spk: personalized.then(|| EncoderVars {
                fb: pair("spk.fb"),
                conv1: pair("spk.conv1"),
                conv2: pair("spk.conv2"),
                conv3: pair("spk.conv3"),
                prelu1: get("spk.prelu1"),
                prelu2: get("spk.prelu2"),
            }),
            all,
        })
    }

    pub fn constants<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>) -> Result<Self, ModelError> {
        Self::bind(model, tape, false)
    }

    pub fn trainable<T: Scalar>(model: &Model<T>, tape: &mut Tape<T>) -> Result<Self, ModelError> {
        Self::bind(model, tape, true)
    }
}

/// Embedding `[E]` of a raw enrollment waveform.
pub fn speaker_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &FtjnfConfig,
    samples: &[f64],
) -> Result<Var, ModelError> {
    let (Some(scfg), Some(v)) = (&cfg.speaker_encoder, &vars.spk) else {
        return Err(ModelError::UnexpectedEmbedding);
    };
    if samples.len() < scfg.min_samples() {
        return Err(ModelError::EnrollmentTooShort {
            len: samples.len(),
            kernel: scfg.min_samples(),
        });
    }
    // Unit RMS, so the embedding does not depend on the recording level.
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    let gain = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let scaled: Vec<f64> = samples.iter().map(|v| v * gain).collect();
    let x = tape.constant(Tensor::from_f64(&[samples.len(), 1], &scaled)?);
    let fb = tape.conv1d(x, v.fb.0, v.fb.1, scfg.stride, 0)?;
    let fb = tape.relu(fb);
    let a1 = tape.conv1d(fb, v.conv1.0, v.conv1.1, 1, 0)?;
    let a1 = tape.prelu(a1, v.prelu1)?;
    let a2 = tape.conv1d(a1, v.conv2.0, v.conv2.1, 1, 0)?;
    let a2 = tape.prelu(a2, v.prelu2)?;
    let a3 = tape.conv1d(a2, v.conv3.0, v.conv3.1, 1, 0)?;
    debug_assert_eq!(tape.shape(a3)[1], scfg.embed_dim);
    Ok(tape.mean_rows(a3)?)
}

/// Mask `[T, F]` for normalized magnitudes `[T, F, C]`. `embedding` must be
/// given exactly when the model is personalized.
pub fn ftjnf_mask<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &FtjnfConfig,
    mag: &MagTensor,
    embedding: Option<Var>,
) -> Result<Var, ModelError> {
    if mag.bins != cfg.bins || mag.channels != cfg.channels || mag.frames == 0 {
        return Err(ModelError::Input(format!(
            "features {}x{}x{} do not match a model with {} bins and {} channels",
            mag.frames, mag.bins, mag.channels, cfg.bins, cfg.channels
        )));
    }
    let (t, f, c) = (mag.frames, mag.bins, mag.channels);
    let cond = match (vars.cond, embedding) {
        (Some(w), Some(e)) => Some((w, e)),
        (Some(_), None) => return Err(ModelError::MissingEmbedding),
        (None, Some(_)) => return Err(ModelError::UnexpectedEmbedding),
        (None, None) => None,
    };

    // Frequency-major input: one sequence over bins per frame.
    let mut xf = vec![T::zero(); f * t * c];
    for ti in 0..t {
        for fi in 0..f {
            for ci in 0..c {
                xf[(fi * t + ti) * c + ci] = T::from_f64(mag.data[(ti * f + fi) * c + ci]);
            }
        }
    }
    let x = tape.constant(Tensor::new(&[f, t, c], xf)?);
    let mut h1 = tape.lstm(x, &vars.flstm)?;
    if let Some(((w, b), e)) = cond {
        let e_dim = tape.shape(e).iter().product();
        let e_row = tape.reshape(e, &[1, e_dim])?;
        let d = tape.matmul_bt(e_row, w)?;
        let d = tape.add_row(d, b)?;
        let hid = tape.shape(d)[1];
        let d = tape.reshape(d, &[hid])?;
        h1 = tape.mul_row(h1, d)?;
    }
    let h1 = tape.swap01(h1)?;
    let h2 = tape.lstm(h1, &vars.tlstm)?;
    let ht = cfg.t_hidden;
    let h2 = tape.reshape(h2, &[t * f, ht])?;
    let z = tape.matmul_bt(h2, vars.out.0)?;
    let z = tape.add_row(z, vars.out.1)?;
    let m = tape.tanh(z);
    Ok(tape.reshape(m, &[t, f])?)
}
