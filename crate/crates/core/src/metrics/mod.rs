//! Objective evaluation against the clean outer-microphone target.

mod estoi;
mod sweep;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::audio::{write_wav, AudioBuffer, WavFormat};
use crate::mixsim::{Condition, EvalAudio, EvalItem, Sensor};

pub use estoi::{estoi, resample};
pub use sweep::{
    default_sweep_grid, format_db, parse_db, sweep_csv, sweep_enroll_snr, sweep_svg, write_sweep_csv,
    write_sweep_svg, SweepRow,
};

/// Aggregates clamp SI-SDR to this magnitude so infinite sentinels stay averageable.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Residual-to-signal energy ratio treated as exact (about -240 dB).
const EXACT: f64 = 1e-24;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("estimate has {est} samples but reference has {reference}")]
    LengthMismatch { est: usize, reference: usize },
    #[error("sample rates differ ({0} vs {1} Hz)")]
    RateMismatch(u32, u32),
    #[error("reference has zero energy")]
    ZeroReference,
    #[error("only {frames} frames left after silence removal, need {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("no eval items match the requested conditions")]
    EmptySet,
    #[error("item {id}: no interferer enrollment stored")]
    NoInterfererEnrollment { id: String },
    #[error("pesq hook: {0}")]
    Pesq(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Scale-invariant SDR in dB. Returns `+inf` when `est` is a scaled copy of
/// `reference` up to rounding, and `-inf` when it has no component along it.
pub fn si_sdr(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64, MetricError> {
    if est.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    let rr: f64 = reference.energy();
    if rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let ee = est.energy();
    let alpha = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| e * r)
        .sum::<f64>()
        / rr;
    let target = alpha * alpha * rr;
    let err: f64 = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if target <= EXACT * ee || ee == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if err <= EXACT * ee {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / err).log10())
}

/// Something that turns an eval item into an estimate of the clean outer
/// signal.
pub trait Enhancer {
    fn name(&self) -> &str;

    /// Sensor whose enrollment the system consumes; `None` when it takes none.
    fn enroll_sensor(&self) -> Option<Sensor> {
        None
    }

    /// Training configuration label for report keys.
    fn train_config(&self) -> Option<String> {
        None
    }

    fn enhance(&self, item: &EvalAudio, enroll: Option<&AudioBuffer>) -> crate::Result<AudioBuffer>;
}

/// Returns the outer-microphone mixture unchanged.
#[derive(Debug, Clone, Default)]
pub struct Identity;

impl Enhancer for Identity {
    fn name(&self) -> &str {
        "noisy"
    }

    fn enhance(&self, item: &EvalAudio, _: Option<&AudioBuffer>) -> crate::Result<AudioBuffer> {
        Ok(item.y.outer.clone())
    }
}

/// Returns the clean target.
#[derive(Debug, Clone, Default)]
pub struct Oracle;

impl Enhancer for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn enhance(&self, item: &EvalAudio, _: Option<&AudioBuffer>) -> crate::Result<AudioBuffer> {
        Ok(item.s.outer.clone())
    }
}

/// Which enrollment a personalized system receives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnrollmentChoice {
    /// The target speaker's enrollment mixed with noise at this SNR
    /// (`+inf` is clean).
    Target { snr_db: f64 },
    /// The interfering speaker's clean enrollment.
    Interferer,
}

impl Default for EnrollmentChoice {
    fn default() -> Self {
        EnrollmentChoice::Target {
            snr_db: f64::INFINITY,
        }
    }
}

/// External PESQ scorer: invoked as `<exe> <reference.wav> <degraded.wav>`
/// and expected to print a number on stdout.
#[derive(Debug, Clone)]
pub struct PesqHook {
    pub exe: PathBuf,
    /// Where enhanced signals are written for the tool to read.
    pub work_dir: PathBuf,
}

impl PesqHook {
    fn score(&self, id: &str, reference: &Path, est: &AudioBuffer) -> Result<f64, MetricError> {
        fs::create_dir_all(&self.work_dir).map_err(|source| MetricError::Io {
            path: self.work_dir.clone(),
            source,
        })?;
        let deg = self.work_dir.join(format!("{id}_enhanced.wav"));
        write_wav(est, &deg, WavFormat::Float32).map_err(|e| MetricError::Pesq(e.to_string()))?;
        let out = Command::new(&self.exe)
            .arg(reference)
            .arg(&deg)
            .output()
            .map_err(|e| MetricError::Pesq(format!("{}: {e}", self.exe.display())))?;
        if !out.status.success() {
            return Err(MetricError::Pesq(format!("{} exited with {}", self.exe.display(), out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.split_whitespace()
            .find_map(|t| t.parse::<f64>().ok())
            .ok_or_else(|| MetricError::Pesq(format!("no score in output `{}`", text.trim())))
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Conditions to score; empty means all.
    pub conditions: Vec<Condition>,
    pub enrollment: EnrollmentChoice,
    pub pesq: Option<PesqHook>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub sir_db: Option<f64>,
    pub si_sdr_db: f64,
    pub estoi: f64,
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub condition: Condition,
    pub items: usize,
    pub si_sdr_db: f64,
    pub estoi: f64,
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub system: String,
    pub enroll_sensor: Option<Sensor>,
    pub train_config: Option<String>,
    pub rows: Vec<MetricRow>,
}

/// Mean of SI-SDR values after clamping to ±[`SI_SDR_CAP_DB`].
pub fn mean_capped_si_sdr(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB), n + 1));
    sum / n as f64
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// Per-condition means, conditions in N, V, N+V order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut by: BTreeMap<Condition, Vec<&MetricRow>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.condition).or_default().push(r);
        }
        by.into_iter()
            .map(|(condition, rows)| {
                let n = rows.len();
                let pesq: Vec<f64> = rows.iter().filter_map(|r| r.pesq).collect();
                AggregateRow {
                    condition,
                    items: n,
                    si_sdr_db: mean_capped_si_sdr(rows.iter().map(|r| r.si_sdr_db)),
                    estoi: rows.iter().map(|r| r.estoi).sum::<f64>() / n as f64,
                    pesq: (pesq.len() == n).then(|| pesq.iter().sum::<f64>() / n as f64),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,condition,snr_db,sir_db,si_sdr_db,estoi,pesq\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.id,
                r.condition,
                opt(r.snr_db),
                opt(r.sir_db),
                r.si_sdr_db,
                r.estoi,
                opt(r.pesq)
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), MetricError> {
    fs::write(path, text).map_err(|source| MetricError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Aggregate table over several reports, keyed by system, enrollment
/// sensor, training configuration and condition.
pub fn aggregate_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("system,enroll_sensor,train_config,condition,items,si_sdr_db,estoi,pesq\n");
    for rep in reports {
        for a in rep.aggregate() {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                rep.system,
                rep.enroll_sensor.map(Sensor::name).unwrap_or(""),
                rep.train_config.as_deref().unwrap_or(""),
                a.condition,
                a.items,
                a.si_sdr_db,
                a.estoi,
                opt(a.pesq)
            )
            .expect("string write");
        }
    }
    s
}

pub fn write_aggregate_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<(), MetricError> {
    write_text(path.as_ref(), &aggregate_csv(reports))
}

/// Enrollment for `item` under `choice`, or `None` for systems without one.
pub fn enrollment_for(
    enhancer: &dyn Enhancer,
    item: &EvalItem,
    audio: &EvalAudio,
    choice: EnrollmentChoice,
) -> crate::Result<Option<AudioBuffer>> {
    let Some(sensor) = enhancer.enroll_sensor() else {
        return Ok(None);
    };
    Ok(Some(match choice {
        EnrollmentChoice::Target { snr_db } => audio.enrollment(sensor, snr_db)?,
        EnrollmentChoice::Interferer => audio
            .interferer_enrollment(sensor)
            .cloned()
            .ok_or_else(|| MetricError::NoInterfererEnrollment { id: item.id.clone() })?,
    }))
}

/// Enhances and scores every item whose condition is selected. Rows keep the
/// order of `items`.
pub fn evaluate_set(
    enhancer: &dyn Enhancer,
    items: &[EvalItem],
    opts: &EvalOptions,
) -> crate::Result<MetricReport> {
    let selected: Vec<&EvalItem> = items
        .iter()
        .filter(|i| opts.conditions.is_empty() || opts.conditions.contains(&i.condition))
        .collect();
    if selected.is_empty() {
        return Err(MetricError::EmptySet.into());
    }
    let mut rows = Vec::with_capacity(selected.len());
    for item in selected {
        let audio = item.load_audio()?;
        let enroll = enrollment_for(enhancer, item, &audio, opts.enrollment)?;
        let est = enhancer.enhance(&audio, enroll.as_ref())?;
        let reference = &audio.s.outer;
        let pesq = match &opts.pesq {
            Some(h) => Some(h.score(&item.id, &item.paths.s_o, &est)?),
            None => None,
        };
        rows.push(MetricRow {
            id: item.id.clone(),
            condition: item.condition,
            snr_db: item.snr_db,
            sir_db: item.sir_db,
            si_sdr_db: si_sdr(&est, reference)?,
            estoi: estoi(&est, reference)?,
            pesq,
        });
    }
    Ok(MetricReport {
        system: enhancer.name().to_string(),
        enroll_sensor: enhancer.enroll_sensor(),
        train_config: enhancer.train_config(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn sentinels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(&mut rng, 256);
        assert_eq!(si_sdr(&r, &r).unwrap(), f64::INFINITY);
        assert_eq!(si_sdr(&r.scaled(-3.7), &r).unwrap(), f64::INFINITY);
        let mut o = AudioBuffer::new(vec![0.0; 4]);
        o.samples[1] = 1.0;
        let r4 = AudioBuffer::new(vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(si_sdr(&o, &r4).unwrap(), f64::NEG_INFINITY);
        assert_eq!(si_sdr(&AudioBuffer::zeros(4), &r4).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(si_sdr(&r4, &AudioBuffer::zeros(4)), Err(MetricError::ZeroReference)));
    }

    #[test]
    fn orthogonal_noise_at_tenth_energy_is_ten_db() {
        let r = AudioBuffer::new(vec![1.0, 1.0, 0.0, 0.0]);
        let n = 0.1f64.sqrt();
        let est = AudioBuffer::new(vec![1.0, 1.0, n, n]);
        assert!((si_sdr(&est, &r).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn capped_mean() {
        let m = mean_capped_si_sdr([f64::INFINITY, 0.0, f64::NEG_INFINITY, 10.0]);
        assert_eq!(m, 2.5);
    }

    #[test]
    fn report_csv_layout() {
        let rep = MetricReport {
            system: "x".into(),
            enroll_sensor: Some(Sensor::InEar),
            train_config: Some("D".into()),
            rows: vec![
                MetricRow {
                    id: "a".into(),
                    condition: Condition::V,
                    snr_db: None,
                    sir_db: Some(-2.5),
                    si_sdr_db: 4.0,
                    estoi: 0.5,
                    pesq: None,
                },
                MetricRow {
                    id: "b".into(),
                    condition: Condition::V,
                    snr_db: None,
                    sir_db: Some(1.0),
                    si_sdr_db: f64::INFINITY,
                    estoi: 1.0,
                    pesq: None,
                },
            ],
        };
        let csv = rep.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "a,V,,-2.5,4,0.5,");
        assert_eq!(csv.lines().nth(2).unwrap(), "b,V,,1,inf,1,");
        let agg = aggregate_csv(&[rep]);
        assert_eq!(agg.lines().nth(1).unwrap(), "x,IM,D,V,2,52,0.75,");
    }
}
