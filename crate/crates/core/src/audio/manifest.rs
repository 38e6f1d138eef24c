use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_wav, AudioBuffer, AudioError, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One recorded utterance, stored as one mono file per sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub path_outer: PathBuf,
    pub path_inear: PathBuf,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    /// A noise recording made with both sensors.
    Paired {
        path_outer: PathBuf,
        path_inear: PathBuf,
    },
    /// A single-channel noise source, spatialized through an impulse-response set.
    MonoWithIrs { path: PathBuf, ir_set: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub id: String,
    #[serde(flatten)]
    pub kind: NoiseKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestEntry {
    Utterance(UtteranceEntry),
    Noise(NoiseEntry),
}

impl ManifestEntry {
    pub fn id(&self) -> &str {
        match self {
            ManifestEntry::Utterance(u) => &u.id,
            ManifestEntry::Noise(n) => &n.id,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a JSON-lines manifest. Relative paths are resolved against the
/// manifest's directory. With `validate`, every referenced file is opened and
/// checked (rate, channel layout, equal sensor lengths, complete IR sets).
pub fn load_manifest(
    path: impl AsRef<Path>,
    validate: bool,
) -> Result<Vec<ManifestEntry>, AudioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| AudioError::Manifest { line, msg };
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if !value.is_object() {
            return Err(bad("expected a JSON object".into()));
        }
        let mut entry = if value.get("kind").is_some() {
            let mut n: NoiseEntry =
                serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            match &mut n.kind {
                NoiseKind::Paired {
                    path_outer,
                    path_inear,
                } => {
                    *path_outer = resolve(base, path_outer);
                    *path_inear = resolve(base, path_inear);
                }
                NoiseKind::MonoWithIrs { path, ir_set } => {
                    *path = resolve(base, path);
                    *ir_set = resolve(base, ir_set);
                }
            }
            ManifestEntry::Noise(n)
        } else {
            let mut u: UtteranceEntry =
                serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            u.path_outer = resolve(base, &u.path_outer);
            u.path_inear = resolve(base, &u.path_inear);
            ManifestEntry::Utterance(u)
        };
        if !seen.insert(entry.id().to_string()) {
            return Err(AudioError::DuplicateId {
                line,
                id: entry.id().to_string(),
            });
        }
        if validate {
            validate_entry(&mut entry, line)?;
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn wav_len(path: &Path, line: usize) -> Result<usize, AudioError> {
    read_wav(path)
        .map(|b| b.len())
        .map_err(|e| AudioError::Validation {
            line,
            msg: e.to_string(),
        })
}

fn validate_entry(entry: &mut ManifestEntry, line: usize) -> Result<(), AudioError> {
    let mismatch = |a: usize, b: usize| AudioError::Validation {
        line,
        msg: format!("sensor lengths differ ({a} vs {b} samples)"),
    };
    match entry {
        ManifestEntry::Utterance(u) => {
            let (a, b) = (wav_len(&u.path_outer, line)?, wav_len(&u.path_inear, line)?);
            if a != b {
                return Err(mismatch(a, b));
            }
        }
        ManifestEntry::Noise(n) => match &n.kind {
            NoiseKind::Paired {
                path_outer,
                path_inear,
            } => {
                let (a, b) = (wav_len(path_outer, line)?, wav_len(path_inear, line)?);
                if a != b {
                    return Err(mismatch(a, b));
                }
            }
            NoiseKind::MonoWithIrs { path, ir_set } => {
                wav_len(path, line)?;
                IrSet::load(ir_set).map_err(|e| AudioError::Validation {
                    line,
                    msg: e.to_string(),
                })?;
            }
        },
    }
    Ok(())
}

/// Writes entries as JSON lines, paths verbatim.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io = |source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for e in entries {
        let line = match e {
            ManifestEntry::Utterance(u) => serde_json::to_string(u),
            ManifestEntry::Noise(n) => serde_json::to_string(n),
        }
        .expect("manifest entries serialize");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

/// Per-direction impulse responses for both sensors, stored in a directory as
/// `ir_<d>_outer.wav` / `ir_<d>_inear.wav` for d = 0, 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct IrSet {
    /// `(outer, in-ear)` response per direction.
    pub directions: Vec<(AudioBuffer, AudioBuffer)>,
}

impl IrSet {
    pub fn file_name(direction: usize, inear: bool) -> String {
        format!(
            "ir_{direction}_{}.wav",
            if inear { "inear" } else { "outer" }
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, AudioError> {
        let dir = dir.as_ref();
        let err = |msg: String| AudioError::IrSet {
            dir: dir.to_path_buf(),
            msg,
        };
        let mut directions = Vec::new();
        loop {
            let d = directions.len();
            let outer = dir.join(Self::file_name(d, false));
            let inear = dir.join(Self::file_name(d, true));
            match (outer.exists(), inear.exists()) {
                (false, false) => break,
                (true, true) => {}
                _ => return Err(err(format!("direction {d} is missing one sensor"))),
            }
            let o = read_wav(&outer)?;
            let i = read_wav(&inear)?;
            if o.is_empty() || i.is_empty() {
                return Err(err(format!("direction {d} has an empty response")));
            }
            directions.push((o, i));
        }
        if directions.is_empty() {
            return Err(err("no impulse responses found".into()));
        }
        debug_assert!(directions.iter().all(|(o, _)| o.rate == SAMPLE_RATE));
        Ok(Self { directions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    const U1: &str = r#"{"id":"a","speaker":"s1","split":"train","path_outer":"a_o.wav","path_inear":"a_i.wav","duration_s":1.0}"#;
    const U2: &str = r#"{"id":"b","speaker":"s1","split":"val","path_outer":"b_o.wav","path_inear":"b_i.wav","duration_s":2.0}"#;
    const N1: &str = r#"{"id":"n","kind":"mono-with-irs","path":"n.wav","ir_set":"irs"}"#;

    #[test]
    fn empty_file_is_empty_list() {
        let d = tempfile::tempdir().unwrap();
        assert!(load_manifest(write(d.path(), ""), false).unwrap().is_empty());
    }

    #[test]
    fn keeps_file_order_and_resolves_paths() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), &format!("{U2}\n{N1}\n{U1}\n"));
        let e = load_manifest(&p, false).unwrap();
        let ids: Vec<_> = e.iter().map(|e| e.id()).collect();
        assert_eq!(ids, ["b", "n", "a"]);
        match &e[0] {
            ManifestEntry::Utterance(u) => {
                assert_eq!(u.path_outer, d.path().join("b_o.wav"));
                assert_eq!(u.split, Split::Val);
            }
            _ => panic!("expected utterance"),
        }
        assert!(matches!(
            &e[1],
            ManifestEntry::Noise(NoiseEntry {
                kind: NoiseKind::MonoWithIrs { .. },
                ..
            })
        ));
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let d = tempfile::tempdir().unwrap();
        let bad = r#"{"id":"c","split":"train","path_outer":"x","path_inear":"y","duration_s":1.0}"#;
        let p = write(d.path(), &format!("{U1}\n{bad}\n"));
        let err = load_manifest(&p, false).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, AudioError::Manifest { line: 2, .. }));
        assert!(msg.contains("speaker"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), &format!("{U1}\n{U1}\n"));
        assert!(matches!(
            load_manifest(&p, false),
            Err(AudioError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn validation_catches_missing_files() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), U1);
        assert!(load_manifest(&p, false).is_ok());
        assert!(matches!(
            load_manifest(&p, true),
            Err(AudioError::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry::Utterance(serde_json::from_str(U1).unwrap()),
            ManifestEntry::Noise(serde_json::from_str(N1).unwrap()),
        ];
        let p = d.path().join("w.jsonl");
        write_manifest(&p, &entries).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("{U1}\n{N1}\n"));
    }
}
