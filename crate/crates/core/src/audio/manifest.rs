//! Line-delimited JSON manifests: one object per line with the fields of
//! [`UtteranceRecord`]. Strings use JSON escaping, so ids and paths may
//! contain any UTF-8 text including quotes and newlines.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::ArousalLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: String,
    pub speaker_id: String,
    pub arousal: ArousalLabel,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn resolve_audio(&self, root: &Path) -> PathBuf {
        root.join(&self.audio_path)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    utterance_id: String,
    audio_path: String,
    speaker_id: String,
    arousal: f64,
    split: Split,
}

/// Sidecar holding the exact mel of an utterance, next to its audio.
pub fn mel_sidecar_path(audio: &Path) -> PathBuf {
    audio.with_extension("mel")
}

/// Parses a manifest, preserving file order. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        let arousal = ArousalLabel::new(raw.arousal).map_err(|_| Error::ArousalRange {
            value: raw.arousal,
            context: Some(format!("{}:{n} ({})", path.display(), raw.utterance_id)),
        })?;
        if !seen.insert(raw.utterance_id.clone()) {
            return Err(err(n, format!("duplicate utterance id `{}`", raw.utterance_id)));
        }
        out.push(UtteranceRecord {
            utterance_id: raw.utterance_id,
            audio_path: raw.audio_path,
            speaker_id: raw.speaker_id,
            arousal,
            split: raw.split,
        });
    }
    if out.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{}", serde_json::to_string(r)?).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
