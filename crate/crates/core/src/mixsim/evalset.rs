//! Evaluation mixtures written to disk once so every system is scored on the
//! same audio.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{draw_interferer, draw_noise_clip, sample_enrollment};
use super::{
    build_eval_condition, mix_enrollment, Condition, Corpus, EnrollmentRequest, MixError, Sensor,
    TwoSensor,
};
use crate::audio::{read_wav, write_wav, AudioBuffer, Split, WavFormat};
use crate::rng::rng_for;

/// Value of [`EvalItem::config`]: evaluation follows the physical mixing
/// model regardless of how a system was trained.
pub const PHYSICAL: &str = "physical";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetOptions {
    pub conditions: Vec<Condition>,
    /// Mixtures per test utterance and condition.
    pub repeats: usize,
    pub snr_range_db: (f64, f64),
    pub sir_range_db: (f64, f64),
    pub seed: u64,
    pub split: Split,
}

impl Default for EvalSetOptions {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            repeats: 1,
            snr_range_db: (-10.0, 10.0),
            sir_range_db: (-10.0, 10.0),
            seed: 0,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPaths {
    pub y_o: PathBuf,
    pub y_i: PathBuf,
    pub s_o: PathBuf,
    pub s_i: PathBuf,
    pub enroll_o: PathBuf,
    pub enroll_i: PathBuf,
    pub enroll_noise_o: PathBuf,
    pub enroll_noise_i: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer_enroll_o: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer_enroll_i: Option<PathBuf>,
}

impl EvalPaths {
    fn for_id(id: &str, with_interferer: bool) -> Self {
        let p = |s: &str| PathBuf::from(format!("{id}_{s}.wav"));
        Self {
            y_o: p("y_o"),
            y_i: p("y_i"),
            s_o: p("s_o"),
            s_i: p("s_i"),
            enroll_o: p("enroll_o"),
            enroll_i: p("enroll_i"),
            enroll_noise_o: p("enroll_noise_o"),
            enroll_noise_i: p("enroll_noise_i"),
            interferer_enroll_o: with_interferer.then(|| p("interferer_enroll_o")),
            interferer_enroll_i: with_interferer.then(|| p("interferer_enroll_i")),
        }
    }

    fn all_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![
            &mut self.y_o,
            &mut self.y_i,
            &mut self.s_o,
            &mut self.s_i,
            &mut self.enroll_o,
            &mut self.enroll_i,
            &mut self.enroll_noise_o,
            &mut self.enroll_noise_i,
        ];
        v.extend(self.interferer_enroll_o.as_mut());
        v.extend(self.interferer_enroll_i.as_mut());
        v
    }
}

/// One line of the eval-set metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub id: String,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub sir_db: Option<f64>,
    pub config: String,
    pub target_speaker: String,
    pub interferer_speaker: Option<String>,
    pub utterance_id: String,
    pub paths: EvalPaths,
}

/// Audio of one eval item.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAudio {
    pub y: TwoSensor,
    pub s: TwoSensor,
    /// Clean enrollment utterance of the target speaker.
    pub enroll: TwoSensor,
    /// Noise of the same length, used for noisy-enrollment evaluation.
    pub enroll_noise: TwoSensor,
    /// Enrollment utterance of the interfering speaker, when there is one.
    pub interferer_enroll: Option<TwoSensor>,
}

impl EvalAudio {
    /// Target enrollment at `sensor`, mixed with the stored enrollment noise
    /// at `snr_db` (`+inf` is the clean utterance).
    pub fn enrollment(&self, sensor: Sensor, snr_db: f64) -> Result<AudioBuffer, MixError> {
        mix_enrollment(&self.enroll, &self.enroll_noise, sensor, snr_db)
    }

    pub fn interferer_enrollment(&self, sensor: Sensor) -> Option<&AudioBuffer> {
        self.interferer_enroll.as_ref().map(|e| e.get(sensor))
    }
}

fn read_pair(o: &Path, i: &Path) -> Result<TwoSensor, MixError> {
    TwoSensor::new(read_wav(o)?, read_wav(i)?)
}

impl EvalItem {
    pub fn load_audio(&self) -> Result<EvalAudio, MixError> {
        let p = &self.paths;
        let interferer_enroll = match (&p.interferer_enroll_o, &p.interferer_enroll_i) {
            (Some(o), Some(i)) => Some(read_pair(o, i)?),
            _ => None,
        };
        Ok(EvalAudio {
            y: read_pair(&p.y_o, &p.y_i)?,
            s: read_pair(&p.s_o, &p.s_i)?,
            enroll: read_pair(&p.enroll_o, &p.enroll_i)?,
            enroll_noise: read_pair(&p.enroll_noise_o, &p.enroll_noise_i)?,
            interferer_enroll,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> MixError {
    MixError::EvalSet(format!("{}: {e}", path.display()))
}

fn write_pair(dir: &Path, o: &Path, i: &Path, x: &TwoSensor) -> Result<(), MixError> {
    write_wav(&x.outer, dir.join(o), WavFormat::Float32)?;
    write_wav(&x.inear, dir.join(i), WavFormat::Float32)?;
    Ok(())
}

/// Mixes every utterance of `opts.split` under each condition and writes
/// float32 WAVs plus `items.jsonl` into `out_dir`. All conditions of one
/// (utterance, repeat) share the same noise, interferer and enrollment draws.
/// Returns the metadata path.
pub fn build_eval_set(
    corpus: &Corpus,
    out_dir: impl AsRef<Path>,
    opts: &EvalSetOptions,
) -> Result<PathBuf, MixError> {
    let out = out_dir.as_ref();
    for (name, (lo, hi)) in [("snr", opts.snr_range_db), ("sir", opts.sir_range_db)] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(MixError::Config(format!("{name} range [{lo}, {hi}] is invalid")));
        }
    }
    let targets = corpus.split(opts.split);
    if targets.is_empty() {
        return Err(MixError::EmptySplit);
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut lines = Vec::new();
    for (ti, &u) in targets.iter().enumerate() {
        let utt = &corpus.utterances[u];
        let len = utt.audio.len();
        for r in 0..opts.repeats {
            let mut rng = rng_for(opts.seed, &[ti as u64, r as u64]);
            let snr = rng.random_range(opts.snr_range_db.0..=opts.snr_range_db.1);
            let sir = rng.random_range(opts.sir_range_db.0..=opts.sir_range_db.1);
            let noise = draw_noise_clip(corpus, len, &mut rng)?;
            let (interf, v_utt) = draw_interferer(corpus, &utt.speaker, None, len, &mut rng)?;
            let enroll = sample_enrollment(
                corpus,
                &utt.speaker,
                &utt.id,
                EnrollmentRequest::clean(Sensor::Outer),
                &mut rng,
            )?;
            let enroll_utt = corpus
                .utterances
                .iter()
                .find(|x| x.id == enroll.source_id)
                .expect("enrollment comes from the corpus");
            let enroll_noise = draw_noise_clip(corpus, enroll_utt.audio.len(), &mut rng)?;
            let interferer_speaker = corpus.utterances[v_utt].speaker.clone();
            let v_id = &corpus.utterances[v_utt].id;
            let other: Vec<usize> = corpus
                .utterances_of(&interferer_speaker, None)
                .into_iter()
                .filter(|&i| &corpus.utterances[i].id != v_id)
                .collect();
            let interferer_enroll = other.choose(&mut rng).map(|&i| &corpus.utterances[i].audio);

            for &cond in &opts.conditions {
                let ex = build_eval_condition(&utt.audio, &noise, &interf, cond, snr, sir)?;
                let id = format!("{}_r{r}_{}", utt.id, cond_tag(cond));
                let paths = EvalPaths::for_id(&id, interferer_enroll.is_some());
                write_pair(out, &paths.y_o, &paths.y_i, &ex.mixture())?;
                write_pair(out, &paths.s_o, &paths.s_i, &ex.target())?;
                write_pair(out, &paths.enroll_o, &paths.enroll_i, &enroll_utt.audio)?;
                write_pair(out, &paths.enroll_noise_o, &paths.enroll_noise_i, &enroll_noise)?;
                if let (Some(x), Some(o), Some(i)) = (
                    interferer_enroll,
                    &paths.interferer_enroll_o,
                    &paths.interferer_enroll_i,
                ) {
                    write_pair(out, o, i, x)?;
                }
                let item = EvalItem {
                    id,
                    condition: cond,
                    snr_db: ex.meta.snr_db,
                    sir_db: ex.meta.sir_db,
                    config: PHYSICAL.to_string(),
                    target_speaker: utt.speaker.clone(),
                    interferer_speaker: cond.has_interferer().then(|| interferer_speaker.clone()),
                    utterance_id: utt.id.clone(),
                    paths,
                };
                lines.push(serde_json::to_string(&item).expect("eval items serialize"));
            }
        }
    }
    let meta = out.join("items.jsonl");
    let mut f = fs::File::create(&meta).map_err(|e| io_err(&meta, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| io_err(&meta, e))?;
    }
    Ok(meta)
}

fn cond_tag(c: Condition) -> &'static str {
    match c {
        Condition::N => "N",
        Condition::V => "V",
        Condition::NV => "NV",
    }
}

/// Reads eval-set metadata, resolving WAV paths against its directory.
pub fn load_eval_set(path: impl AsRef<Path>) -> Result<Vec<EvalItem>, MixError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut item: EvalItem = serde_json::from_str(line)
            .map_err(|e| MixError::EvalSet(format!("{} line {}: {e}", path.display(), i + 1)))?;
        for p in item.paths.all_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::super::corpus::tests::toy_corpus;
    use super::*;
    use crate::mixsim::snr_db;

    #[test]
    fn round_trip_and_shared_draws() {
        let c = toy_corpus();
        let dir = tempfile::tempdir().unwrap();
        let opts = EvalSetOptions {
            repeats: 2,
            seed: 3,
            ..EvalSetOptions::default()
        };
        let meta = build_eval_set(&c, dir.path(), &opts).unwrap();
        let items = load_eval_set(&meta).unwrap();
        // Two test utterances, two repeats, three conditions.
        assert_eq!(items.len(), 12);
        let n = &items[0];
        let v = &items[1];
        assert_eq!(n.condition, Condition::N);
        assert_eq!(v.condition, Condition::V);
        assert!(n.sir_db.is_none() && v.snr_db.is_none());
        assert!(n.interferer_speaker.is_none());
        assert_ne!(v.interferer_speaker.as_deref(), Some(v.target_speaker.as_str()));
        let nv = &items[2];
        assert_eq!(nv.snr_db, n.snr_db);
        assert_eq!(nv.sir_db, v.sir_db);

        let a = v.load_audio().unwrap();
        // float32 storage: compare at single precision.
        let mut resid = a.y.outer.clone();
        for (r, s) in resid.samples.iter_mut().zip(&a.s.outer.samples) {
            *r -= s;
        }
        assert!((snr_db(&a.s.outer, &resid) - v.sir_db.unwrap()).abs() < 1e-3);
        assert_eq!(a.enrollment(Sensor::InEar, f64::INFINITY).unwrap(), a.enroll.inear);
        assert_eq!(a.s.len(), a.y.len());
    }

    #[test]
    fn same_seed_same_files() {
        let c = toy_corpus();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let opts = EvalSetOptions::default();
        build_eval_set(&c, d1.path(), &opts).unwrap();
        build_eval_set(&c, d2.path(), &opts).unwrap();
        let mut names: Vec<_> = fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for n in names {
            assert_eq!(
                fs::read(d1.path().join(&n)).unwrap(),
                fs::read(d2.path().join(&n)).unwrap()
            );
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        let c = toy_corpus();
        let dir = tempfile::tempdir().unwrap();
        let opts = EvalSetOptions {
            snr_range_db: (5.0, -5.0),
            ..EvalSetOptions::default()
        };
        assert!(matches!(build_eval_set(&c, dir.path(), &opts), Err(MixError::Config(_))));
    }
}
