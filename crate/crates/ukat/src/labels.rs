//! Merged label space: audio-event labels then keyword labels.
//!
//! The classifier's output vector is the concatenation of the two blocks,
//! event indices `0..C` and keyword indices `C..C+K`. Merging requires a
//! generic `Speech` event class; keyword utterances are speech, so keyword
//! targets co-activate it, and out-of-vocabulary keyword clips (manifest
//! name `unknown`) collapse onto it entirely.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::{ManifestEntry, SourceTag};

pub const SPEECH_LABEL: &str = "Speech";
/// Manifest pseudo-label for keyword clips outside the keyword vocabulary.
/// Never a vocabulary entry itself; encodes as pure [`SPEECH_LABEL`].
pub const UNKNOWN_LABEL: &str = "unknown";

const VOCAB_SEPARATOR: &str = "#---";

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    at: Vec<String>,
    kws: Vec<String>,
    speech: Option<usize>,
    /// Name to global index; lookup only, iteration order never observed.
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Build from the two blocks, checking name hygiene and uniqueness.
    /// `Speech` membership is optional here; [`merge_vocabularies`] demands it.
    pub fn new(at: Vec<String>, kws: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(at.len() + kws.len());
        for (i, name) in at.iter().chain(kws.iter()).enumerate() {
            if name.is_empty() {
                return Err(Error::Vocabulary(format!("empty label name at index {i}")));
            }
            if name == UNKNOWN_LABEL {
                return Err(Error::Vocabulary(format!(
                    "'{UNKNOWN_LABEL}' is reserved for out-of-vocabulary keyword clips"
                )));
            }
            if name.contains('\n') {
                return Err(Error::Vocabulary(format!("label {name:?} contains a newline")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate label {name:?}")));
            }
        }
        let speech = at.iter().position(|n| n == SPEECH_LABEL);
        Ok(LabelVocabulary { at, kws, speech, index })
    }

    pub fn num_at(&self) -> usize {
        self.at.len()
    }

    pub fn num_kws(&self) -> usize {
        self.kws.len()
    }

    pub fn len(&self) -> usize {
        self.at.len() + self.kws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at_labels(&self) -> &[String] {
        &self.at
    }

    pub fn kws_labels(&self) -> &[String] {
        &self.kws
    }

    /// Global index of the `Speech` event, when the event block has one.
    pub fn speech_index(&self) -> Option<usize> {
        self.speech
    }

    pub fn label(&self, i: usize) -> &str {
        if i < self.at.len() {
            &self.at[i]
        } else {
            &self.kws[i - self.at.len()]
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_kws_index(&self, i: usize) -> bool {
        i >= self.at.len() && i < self.len()
    }
}

/// Concatenate an event vocabulary and a keyword vocabulary.
///
/// The event list must contain `Speech`; any name appearing twice, within a
/// block or across blocks, is a collision.
pub fn merge_vocabularies(at: &[String], kws: &[String]) -> Result<LabelVocabulary> {
    if at.is_empty() {
        return Err(Error::Vocabulary("event vocabulary is empty".into()));
    }
    let v = LabelVocabulary::new(at.to_vec(), kws.to_vec())?;
    if v.speech_index().is_none() {
        return Err(Error::Vocabulary(format!(
            "event vocabulary must contain {SPEECH_LABEL:?}"
        )));
    }
    Ok(v)
}

/// Multi-hot (or soft) target vector for one manifest entry.
///
/// Keyword-source entries activate their keyword, plus `Speech` when
/// `speech_on_target` is set; the `unknown` pseudo-label activates `Speech`
/// alone. Event-source entries use their soft score map when present,
/// otherwise hard ones on each listed label. Every produced vector has at
/// least one strictly positive entry.
pub fn encode_targets(entry: &ManifestEntry, v: &LabelVocabulary, speech_on_target: bool) -> Result<Vec<f32>> {
    let mut y = vec![0.0f32; v.len()];
    match entry.source {
        SourceTag::Kws => {
            if entry.labels.is_empty() {
                return Err(Error::Encoding(format!("{}: keyword entry has no labels", entry.audio)));
            }
            for name in &entry.labels {
                if name == UNKNOWN_LABEL {
                    let s = speech_required(v, &entry.audio)?;
                    y[s] = 1.0;
                    continue;
                }
                let i = v.index_of(name).ok_or_else(|| {
                    Error::Encoding(format!("{}: label {name:?} not in vocabulary", entry.audio))
                })?;
                y[i] = 1.0;
                if v.is_kws_index(i) && speech_on_target {
                    let s = speech_required(v, &entry.audio)?;
                    y[s] = 1.0;
                }
            }
        }
        SourceTag::At => {
            if let Some(soft) = &entry.soft {
                if soft.is_empty() {
                    return Err(Error::Encoding(format!("{}: empty soft target map", entry.audio)));
                }
                for (name, &score) in soft {
                    let i = v.index_of(name).ok_or_else(|| {
                        Error::Encoding(format!("{}: soft label {name:?} not in vocabulary", entry.audio))
                    })?;
                    if !(0.0..=1.0).contains(&score) {
                        return Err(Error::Encoding(format!(
                            "{}: soft score {score} for {name:?} outside [0, 1]",
                            entry.audio
                        )));
                    }
                    y[i] = score;
                }
            } else {
                if entry.labels.is_empty() {
                    return Err(Error::Encoding(format!("{}: event entry has no labels", entry.audio)));
                }
                for name in &entry.labels {
                    let i = v.index_of(name).ok_or_else(|| {
                        Error::Encoding(format!("{}: label {name:?} not in vocabulary", entry.audio))
                    })?;
                    y[i] = 1.0;
                }
            }
        }
    }
    if !y.iter().any(|&t| t > 0.0) {
        return Err(Error::Encoding(format!(
            "{}: target vector has no positive entry",
            entry.audio
        )));
    }
    Ok(y)
}

fn speech_required(v: &LabelVocabulary, audio: &str) -> Result<usize> {
    v.speech_index().ok_or_else(|| {
        Error::Encoding(format!(
            "{audio}: vocabulary has no {SPEECH_LABEL:?} class to carry speech activity"
        ))
    })
}

/// View a score vector as its event and keyword blocks.
pub fn split_prediction<'a>(p: &'a [f32], v: &LabelVocabulary) -> Result<(&'a [f32], &'a [f32])> {
    if p.len() != v.len() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, vocabulary has {}",
            p.len(),
            v.len()
        )));
    }
    Ok(p.split_at(v.num_at()))
}

/// Text form: event names, a `#---` separator line, keyword names.
pub fn vocab_to_text(v: &LabelVocabulary) -> String {
    let mut out = String::new();
    for name in v.at_labels() {
        out.push_str(name);
        out.push('\n');
    }
    out.push_str(VOCAB_SEPARATOR);
    out.push('\n');
    for name in v.kws_labels() {
        out.push_str(name);
        out.push('\n');
    }
    out
}

pub fn parse_vocab_text(text: &str) -> Result<LabelVocabulary> {
    let mut at = Vec::new();
    let mut kws = Vec::new();
    let mut seen_separator = false;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line == VOCAB_SEPARATOR {
            if seen_separator {
                return Err(Error::Vocabulary("vocabulary text has two separator lines".into()));
            }
            seen_separator = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if seen_separator {
            kws.push(line.to_string());
        } else {
            at.push(line.to_string());
        }
    }
    if !seen_separator {
        return Err(Error::Vocabulary(format!(
            "vocabulary text is missing the {VOCAB_SEPARATOR:?} separator line"
        )));
    }
    LabelVocabulary::new(at, kws)
}

pub fn read_vocab_file(path: &Path) -> Result<LabelVocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocab_text(&text)
}

pub fn write_vocab_file(v: &LabelVocabulary, path: &Path) -> Result<()> {
    std::fs::write(path, vocab_to_text(v)).map_err(|e| Error::io(path, e))
}
