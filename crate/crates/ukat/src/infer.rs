//! Turning score vectors into decisions.
//!
//! One score vector covers both halves of the vocabulary. The keyword block
//! gets the first say: if its best score clears the threshold (boundary
//! inclusive), that keyword is the decision. Otherwise the clip falls back
//! to the best event label, so out-of-vocabulary audio still produces a
//! useful tag. Streams are scored in fixed-length chunks; an optional gate
//! can veto keyword firings when chosen event scores say the context is
//! wrong (for example, nobody is speaking).

use std::path::Path;

use serde::Serialize;

use crate::audio::{resample, Waveform};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::labels::LabelVocabulary;
use crate::model::Model;

pub const DEFAULT_DECISION_THRESHOLD: f32 = 0.4;
pub const DEFAULT_CHUNK_SECS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Keyword,
    Event,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub index: usize,
    pub branch: Branch,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WakeCondition {
    /// Event labels whose best score must reach `threshold` for a keyword
    /// decision to stand. An empty list never vetoes anything.
    pub labels: Vec<String>,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPolicy {
    pub threshold: f32,
    pub condition: Option<WakeCondition>,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            threshold: DEFAULT_DECISION_THRESHOLD,
            condition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedDecision {
    pub decision: Decision,
    /// Set when a keyword cleared the threshold but the wake condition
    /// vetoed it and the event fallback took over.
    pub suppressed: bool,
}

fn check_scores(scores: &[f32], v: &LabelVocabulary) -> Result<()> {
    if scores.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} scores for a vocabulary of {}",
            scores.len(),
            v.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at index {i}")));
    }
    Ok(())
}

fn check_threshold(threshold: f32) -> Result<()> {
    if threshold.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "decision threshold {threshold} is not finite"
        )))
    }
}

/// Highest-scoring index in `lo..hi`, earliest winning ties.
fn argmax_range(scores: &[f32], lo: usize, hi: usize) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for i in lo..hi {
        if best.map_or(true, |(_, b)| scores[i] > b) {
            best = Some((i, scores[i]));
        }
    }
    best
}

/// The decision rule over one score vector.
pub fn decide(scores: &[f32], v: &LabelVocabulary, threshold: f32) -> Result<Decision> {
    check_scores(scores, v)?;
    check_threshold(threshold)?;
    if let Some((index, score)) = argmax_range(scores, v.num_at(), v.len()) {
        if score >= threshold {
            return Ok(Decision { index, branch: Branch::Keyword, score });
        }
    }
    match argmax_range(scores, 0, v.num_at()) {
        Some((index, score)) => Ok(Decision { index, branch: Branch::Event, score }),
        None => Err(Error::InvalidArgument(
            "no keyword fired and the vocabulary has no event labels to fall back on".into(),
        )),
    }
}

/// Whether the keyword block alone would fire at `threshold`.
pub fn keyword_fired(scores: &[f32], v: &LabelVocabulary, threshold: f32) -> Result<bool> {
    check_scores(scores, v)?;
    check_threshold(threshold)?;
    if v.num_kws() == 0 {
        return Err(Error::EmptyInput("keyword block"));
    }
    Ok(argmax_range(scores, v.num_at(), v.len()).unwrap().1 >= threshold)
}

/// Event indices scoring at least `threshold`, best first, ties by index.
pub fn events_above(scores: &[f32], v: &LabelVocabulary, threshold: f32) -> Result<Vec<(usize, f32)>> {
    check_scores(scores, v)?;
    check_threshold(threshold)?;
    let mut out: Vec<(usize, f32)> = (0..v.num_at())
        .filter(|&i| scores[i] >= threshold)
        .map(|i| (i, scores[i]))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

/// The `n` best-scoring event indices, ties by index.
pub fn top_events(scores: &[f32], v: &LabelVocabulary, n: usize) -> Result<Vec<(usize, f32)>> {
    let mut out = events_above(scores, v, f32::MIN)?;
    out.truncate(n);
    Ok(out)
}

/// [`decide`], then the wake condition. A vetoed keyword falls back to the
/// best event label and the veto is reported on the result.
pub fn conditional_decide(
    scores: &[f32],
    v: &LabelVocabulary,
    policy: &DecisionPolicy,
) -> Result<GatedDecision> {
    let decision = decide(scores, v, policy.threshold)?;
    let Some(cond) = &policy.condition else {
        return Ok(GatedDecision { decision, suppressed: false });
    };
    check_threshold(cond.threshold)?;
    if decision.branch != Branch::Keyword || cond.labels.is_empty() {
        return Ok(GatedDecision { decision, suppressed: false });
    }
    let mut gate = f32::NEG_INFINITY;
    for name in &cond.labels {
        match v.index_of(name) {
            Some(i) if !v.is_kws_index(i) => gate = gate.max(scores[i]),
            Some(_) => {
                return Err(Error::Config(format!(
                    "wake condition label {name:?} is a keyword, not an event"
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "wake condition label {name:?} is not in the vocabulary"
                )))
            }
        }
    }
    if gate >= cond.threshold {
        return Ok(GatedDecision { decision, suppressed: false });
    }
    let (index, score) = argmax_range(scores, 0, v.num_at()).expect("condition labels are events");
    Ok(GatedDecision {
        decision: Decision { index, branch: Branch::Event, score },
        suppressed: true,
    })
}

/// Splits a clip into fixed-length chunks, zero-padding the trailing
/// remainder so every chunk has the same duration.
pub fn chunk_audio(w: &Waveform, chunk_secs: f64) -> Result<Vec<Waveform>> {
    if !(chunk_secs > 0.0 && chunk_secs.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "chunk duration {chunk_secs} must be a positive finite number of seconds"
        )));
    }
    let step = (chunk_secs * w.sample_rate() as f64).round() as usize;
    if step == 0 {
        return Err(Error::InvalidArgument(format!(
            "chunk duration {chunk_secs}s is under one sample at {} Hz",
            w.sample_rate()
        )));
    }
    let mut chunks = Vec::with_capacity(w.len().div_ceil(step));
    let mut start = 0;
    while start < w.len() {
        let len = step.min(w.len() - start);
        chunks.push(w.slice(start, len).padded_to(step));
        start += step;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Serialize)]
pub struct EventScore {
    pub label: String,
    pub score: f32,
}

/// One scored chunk of a stream, ready for line-oriented output.
#[derive(Debug, Clone, Serialize)]
pub struct ChunkRecord {
    pub chunk: usize,
    pub start_secs: f64,
    pub label: String,
    pub branch: Branch,
    pub score: f32,
    pub suppressed: bool,
    pub events: Vec<EventScore>,
}

/// Scores a whole clip chunk by chunk. The clip is resampled to the model's
/// rate when needed; `n_events` best event tags ride along per chunk.
pub fn infer_clip(
    model: &Model,
    w: &Waveform,
    policy: &DecisionPolicy,
    chunk_secs: f64,
    n_events: usize,
) -> Result<Vec<ChunkRecord>> {
    let extractor = FeatureExtractor::new(&model.frontend)?;
    let wave = if w.sample_rate() == model.frontend.sample_rate {
        w.clone()
    } else {
        resample(w, model.frontend.sample_rate)?
    };
    let mut records = Vec::new();
    for (k, chunk) in chunk_audio(&wave, chunk_secs)?.iter().enumerate() {
        let scores = model.predict(&extractor.extract(chunk)?)?;
        let gated = conditional_decide(&scores, &model.vocab, policy)?;
        let events = top_events(&scores, &model.vocab, n_events)?
            .into_iter()
            .map(|(i, score)| EventScore {
                label: model.vocab.label(i).to_string(),
                score,
            })
            .collect();
        records.push(ChunkRecord {
            chunk: k,
            start_secs: k as f64 * chunk_secs,
            label: model.vocab.label(gated.decision.index).to_string(),
            branch: gated.decision.branch,
            score: gated.decision.score,
            suppressed: gated.suppressed,
            events,
        });
    }
    Ok(records)
}

/// Scores one file at the model's frontend settings, full duration.
pub fn score_file(model: &Model, extractor: &FeatureExtractor, path: &Path) -> Result<Vec<f32>> {
    let w = Waveform::from_wav_file(path)?;
    let wave = if w.sample_rate() == model.frontend.sample_rate {
        w
    } else {
        resample(&w, model.frontend.sample_rate)?
    };
    model.predict(&extractor.extract(&wave)?)
}
