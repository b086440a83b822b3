use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, FgcmError, Result};
use crate::metrics::Key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Dev,
    Eval,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Dev, Subset::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Dev => "dev",
            Subset::Eval => "eval",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Subset::Train),
            "dev" => Ok(Subset::Dev),
            "eval" => Ok(Subset::Eval),
            other => Err(format!("unknown subset {other:?} (expected train, dev or eval)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub audio_path: PathBuf,
    pub key: Key,
    pub subset: Subset,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.subset == subset)
    }
}

/// Subset for protocol-format files, guessed from names like
/// `ASVspoof2019.LA.cm.dev.trl.txt`; train when nothing matches.
fn protocol_subset(path: &Path) -> Subset {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    let parts: Vec<&str> = name.split(|c: char| !c.is_ascii_alphanumeric()).collect();
    if parts.contains(&"dev") {
        Subset::Dev
    } else if parts.contains(&"eval") {
        Subset::Eval
    } else {
        Subset::Train
    }
}

/// Parse manifest text. Lines are either
///
/// ```text
/// utterance_id audio_path key subset
/// speaker utterance_id system attack key      (protocol layout)
/// ```
///
/// Blank lines and `#` comments are skipped. Relative audio paths resolve
/// against `base`; protocol rows point at `<utterance_id>.wav`.
pub fn parse_manifest_text(path: &Path, text: &str, base: &Path) -> Result<Vec<ManifestRow>> {
    let proto_subset = protocol_subset(path);
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| FgcmError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let row = match fields.as_slice() {
            [id, audio, key, subset] => ManifestRow {
                id: id.to_string(),
                audio_path: base.join(audio),
                key: key.parse().map_err(err)?,
                subset: subset.parse().map_err(err)?,
            },
            [_speaker, id, _system, _attack, key] => ManifestRow {
                id: id.to_string(),
                audio_path: base.join(format!("{id}.wav")),
                key: key.parse().map_err(err)?,
                subset: proto_subset,
            },
            _ => {
                return Err(err(format!(
                    "expected 4 fields (id path key subset) or 5 protocol fields, found {}",
                    fields.len()
                )))
            }
        };
        rows.push((i + 1, row));
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, row) in &rows {
        if let Some(first) = seen.insert(row.id.clone(), *line) {
            return Err(FgcmError::Parse {
                path: path.to_path_buf(),
                line: *line,
                detail: format!("duplicate utterance id {} (first seen on line {first})", row.id),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Read and merge one or more manifests. Ids must be unique across all of
/// them; the same audio file appearing in two subsets only warns.
pub fn parse_manifests(paths: &[PathBuf]) -> Result<Manifest> {
    let mut out = Manifest::default();
    let mut ids: HashSet<String> = HashSet::new();
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for row in parse_manifest_text(path, &text, base)? {
            if !ids.insert(row.id.clone()) {
                return Err(FgcmError::Input(format!(
                    "utterance id {} appears in more than one manifest ({})",
                    row.id,
                    path.display()
                )));
            }
            out.rows.push(row);
        }
    }
    let mut subsets_of: HashMap<&Path, HashSet<Subset>> = HashMap::new();
    for r in &out.rows {
        subsets_of.entry(r.audio_path.as_path()).or_default().insert(r.subset);
    }
    let mut overlap: Vec<String> = subsets_of
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(p, _)| p.display().to_string())
        .collect();
    overlap.sort();
    for p in overlap {
        let msg = format!("audio file {p} is listed in more than one subset");
        log::warn!("{msg}");
        out.warnings.push(msg);
    }
    Ok(out)
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    parse_manifests(&[path.to_path_buf()])
}
