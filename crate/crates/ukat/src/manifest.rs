//! Dataset manifests: one JSON object per line.
//!
//! ```text
//! {"audio":"clips/yes_01.wav","labels":["yes"],"split":"train","source":"kws"}
//! {"audio":"clips/park.wav","labels":["Speech"],"soft":{"Speech":0.92},"split":"train","source":"at"}
//! ```
//!
//! Unrecognized fields are ignored so older binaries read newer manifests.
//! Audio paths are stored verbatim; [`resolve_paths`] anchors relative ones
//! at the manifest's own directory.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Kws,
    At,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: String,
    pub labels: Vec<String>,
    /// Teacher scores by label name; insertion order is preserved so a
    /// write-parse cycle is byte-stable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<IndexMap<String, f32>>,
    pub split: String,
    pub source: SourceTag,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        validate_entry(&entry).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn validate_entry(entry: &ManifestEntry) -> std::result::Result<(), String> {
    if entry.audio.is_empty() {
        return Err("empty audio path".into());
    }
    if entry.labels.iter().any(|l| l.is_empty()) {
        return Err("empty label name".into());
    }
    if let Some(soft) = &entry.soft {
        for (name, &score) in soft {
            if !(0.0..=1.0).contains(&score) {
                return Err(format!("soft score {score} for {name:?} outside [0, 1]"));
            }
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Encoding(format!("manifest serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Anchor each relative audio path at `base`; absolute paths pass through.
pub fn resolve_paths(entries: &mut [ManifestEntry], base: &Path) {
    for entry in entries {
        let p = Path::new(&entry.audio);
        if p.is_relative() {
            entry.audio = base.join(p).to_string_lossy().into_owned();
        }
    }
}

/// Parse and resolve against the manifest's directory in one step.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = parse_manifest(path)?;
    if let Some(dir) = path.parent() {
        resolve_paths(&mut entries, dir);
    }
    Ok(entries)
}
