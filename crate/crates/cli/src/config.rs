//! Run configuration: a TOML file layered with dotted-key overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use passe_core::audio::Split;
use passe_core::mixsim::Condition;
use passe_core::{MixConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub speakers: usize,
    pub utterances: usize,
    pub utt_duration_s: (f64, f64),
    pub noise_duration_s: f64,
    pub directions: usize,
    pub ir_len: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            speakers: 6,
            utterances: 8,
            utt_duration_s: (2.5, 4.0),
            noise_duration_s: 10.0,
            directions: 8,
            ir_len: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub conditions: Vec<Condition>,
    pub repeats: usize,
    pub snr_range_db: (f64, f64),
    pub sir_range_db: (f64, f64),
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            repeats: 1,
            snr_range_db: (-10.0, 10.0),
            sir_range_db: (-10.0, 10.0),
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Corpus manifest.
    pub corpus: Option<PathBuf>,
    /// Eval-set metadata (`items.jsonl`).
    pub eval_set: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// The top-level `seed` drives every random stream of a command; it is
/// copied into `train.seed` and `mix.seed` on resolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub mix: MixConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Splits `--a.b value` / `--a.b=value` pairs out of `args`; everything else
/// is returned for clap.
pub fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{key}`: `{p}` is not a section"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Every key in `user` that the schema does not know, as dotted paths.
fn unknown_keys(user: &toml::Table, schema: &serde_json::Map<String, serde_json::Value>, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (schema.get(k), v) {
            (None, toml::Value::Table(t)) if !t.is_empty() => unknown_keys(t, &serde_json::Map::new(), &path, out),
            (None, _) => out.push(path),
            (Some(serde_json::Value::Object(sub)), toml::Value::Table(t)) => unknown_keys(t, sub, &path, out),
            _ => {}
        }
    }
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Loads `file` (if any), applies `overrides` in order and validates.
    /// Unknown keys are all reported in one error.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| anyhow::anyhow!("{}: {}", p.display(), e.message()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let schema = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&table, schema.as_object().expect("config is a table"), "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        let mut full = toml::Table::try_from(RunConfig::default())?;
        merge(&mut full, table);
        let mut cfg: RunConfig = toml::Value::Table(full)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))?;
        cfg.train.seed = cfg.seed;
        cfg.mix.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lists every invalid value at once.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut bad = Vec::new();
        if let Err(e) = self.train.validate() {
            bad.push(format!("train: {e}"));
        }
        if let Err(e) = self.mix.validate() {
            bad.push(format!("mix: {e}"));
        }
        if self.synth.speakers < 2 {
            bad.push("synth.speakers must be at least 2".into());
        }
        if self.synth.utterances == 0 {
            bad.push("synth.utterances must be positive".into());
        }
        let (lo, hi) = self.synth.utt_duration_s;
        if !(lo > 0.0 && lo <= hi) {
            bad.push("synth.utt_duration_s must be an increasing positive range".into());
        }
        if self.eval.repeats == 0 {
            bad.push("eval.repeats must be positive".into());
        }
        for (name, (lo, hi)) in [("eval.snr_range_db", self.eval.snr_range_db), ("eval.sir_range_db", self.eval.sir_range_db)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                bad.push(format!("{name} must be a finite increasing range"));
            }
        }
        if self.eval.conditions.is_empty() {
            bad.push("eval.conditions must not be empty".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bail!("invalid config: {}", bad.join("; "))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
