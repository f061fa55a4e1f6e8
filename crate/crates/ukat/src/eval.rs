//! Evaluation over manifest datasets.
//!
//! Three protocols share one model. Keyword sets score fixed-length chunks
//! and count exact decisions, with out-of-vocabulary clips expected to land
//! on `Speech`. Event sets score whole clips and aggregate ranking quality.
//! Negative sets measure how often silence-adjacent audio wrongly wakes the
//! keyword side, with a clip counting as fired if any of its chunks fires.
//! Threshold sweeps reuse one scoring pass over the audio, so a 20-point
//! sweep costs the same forward work as a single evaluation.

use std::path::Path;

use serde::Serialize;

use crate::audio::{resample, Waveform};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::infer::chunk_audio;
use crate::labels::{encode_targets, LabelVocabulary, SPEECH_LABEL, UNKNOWN_LABEL};
use crate::manifest::ManifestEntry;
use crate::metrics::{accuracy, average_precision, mean_average_precision, rejection_rate};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Keyword,
    Event,
    Negative,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Keyword => "keyword",
            EvalTask::Event => "event",
            EvalTask::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerClassRow {
    pub label: String,
    pub value: f64,
    /// Items behind the value: chunks for accuracy, positive clips for
    /// ranking quality, fired chunks for negatives.
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub task: &'static str,
    pub n_clips: usize,
    pub n_chunks: usize,
    pub decision_threshold: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<PerClassRow>>,
}

/// Per-chunk reductions that every threshold question can be answered from.
struct ChunkSummary {
    kws_best: Option<(usize, f32)>,
    at_best: Option<(usize, f32)>,
}

struct ClipScores {
    chunks: Vec<ChunkSummary>,
    /// Expected decision index for keyword protocols.
    reference: Option<usize>,
}

fn best_in(scores: &[f32], lo: usize, hi: usize) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for i in lo..hi {
        if best.map_or(true, |(_, b)| scores[i] > b) {
            best = Some((i, scores[i]));
        }
    }
    best
}

fn load_at_model_rate(model: &Model, path: &Path) -> Result<Waveform> {
    let w = Waveform::from_wav_file(path)?;
    if w.sample_rate() == model.frontend.sample_rate {
        Ok(w)
    } else {
        resample(&w, model.frontend.sample_rate)
    }
}

/// The expected decision index for one keyword-set entry: the keyword's own
/// slot, or `Speech` for clips labeled out-of-vocabulary.
fn keyword_reference(entry: &ManifestEntry, v: &LabelVocabulary) -> Result<usize> {
    if entry.labels.len() != 1 {
        return Err(Error::Encoding(format!(
            "keyword clip {} carries {} labels, expected exactly one",
            entry.audio,
            entry.labels.len()
        )));
    }
    let name = &entry.labels[0];
    if name == UNKNOWN_LABEL {
        return v.speech_index().ok_or_else(|| {
            Error::Vocabulary(format!(
                "out-of-vocabulary clips need {SPEECH_LABEL:?} in the vocabulary"
            ))
        });
    }
    v.index_of(name)
        .ok_or_else(|| Error::Vocabulary(format!("label {name:?} is not in the vocabulary")))
}

fn collect_chunked(
    model: &Model,
    entries: &[ManifestEntry],
    chunk_secs: f64,
    with_reference: bool,
) -> Result<Vec<ClipScores>> {
    let extractor = FeatureExtractor::new(&model.frontend)?;
    let v = &model.vocab;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let wave = load_at_model_rate(model, Path::new(&e.audio))?;
        let mut chunks = Vec::new();
        for chunk in chunk_audio(&wave, chunk_secs)? {
            let scores = model.predict(&extractor.extract(&chunk)?)?;
            chunks.push(ChunkSummary {
                kws_best: best_in(&scores, v.num_at(), v.len()),
                at_best: best_in(&scores, 0, v.num_at()),
            });
        }
        out.push(ClipScores {
            chunks,
            reference: if with_reference {
                Some(keyword_reference(e, v)?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// Decision index for one chunk summary at a given threshold; mirrors
/// [`decide`] exactly.
fn summary_decision(c: &ChunkSummary, threshold: f32) -> Result<usize> {
    if let Some((i, s)) = c.kws_best {
        if s >= threshold {
            return Ok(i);
        }
    }
    match c.at_best {
        Some((i, _)) => Ok(i),
        None => Err(Error::InvalidArgument(
            "no keyword fired and the vocabulary has no event labels to fall back on".into(),
        )),
    }
}

fn keyword_accuracy(clips: &[ClipScores], threshold: f32) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut predicted = Vec::new();
    let mut reference = Vec::new();
    for clip in clips {
        let r = clip.reference.expect("keyword clips carry references");
        for c in &clip.chunks {
            predicted.push(summary_decision(c, threshold)?);
            reference.push(r);
        }
    }
    Ok((predicted, reference))
}

fn clip_fired(clip: &ClipScores, threshold: f32) -> bool {
    clip.chunks
        .iter()
        .any(|c| c.kws_best.is_some_and(|(_, s)| s >= threshold))
}

pub fn evaluate(
    model: &Model,
    entries: &[ManifestEntry],
    task: EvalTask,
    threshold: f32,
    chunk_secs: f64,
    per_class: bool,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("evaluation manifest"));
    }
    let v = &model.vocab;
    match task {
        EvalTask::Keyword => {
            let clips = collect_chunked(model, entries, chunk_secs, true)?;
            let (predicted, reference) = keyword_accuracy(&clips, threshold)?;
            let acc = accuracy(&predicted, &reference)?;
            let per = per_class.then(|| {
                let mut rows: Vec<PerClassRow> = Vec::new();
                let mut refs: Vec<usize> = clips.iter().filter_map(|c| c.reference).collect();
                refs.sort_unstable();
                refs.dedup();
                for r in refs {
                    let hits = predicted
                        .iter()
                        .zip(&reference)
                        .filter(|&(p, rf)| *rf == r && p == rf)
                        .count();
                    let n = reference.iter().filter(|&&rf| rf == r).count();
                    rows.push(PerClassRow {
                        label: v.label(r).to_string(),
                        value: hits as f64 / n as f64,
                        n,
                    });
                }
                rows
            });
            Ok(EvalReport {
                task: task.name(),
                n_clips: clips.len(),
                n_chunks: predicted.len(),
                decision_threshold: threshold,
                accuracy: Some(acc),
                mean_average_precision: None,
                rejection_rate: None,
                per_class: per,
            })
        }
        EvalTask::Event => {
            let extractor = FeatureExtractor::new(&model.frontend)?;
            let mut scores = Vec::with_capacity(entries.len());
            let mut relevance = Vec::with_capacity(entries.len());
            for e in entries {
                let wave = load_at_model_rate(model, Path::new(&e.audio))?;
                let s = model.predict(&extractor.extract(&wave)?)?;
                scores.push(s[..v.num_at()].to_vec());
                let y = encode_targets(e, v, true)?;
                relevance.push(y[..v.num_at()].iter().map(|&t| t > 0.5).collect::<Vec<bool>>());
            }
            let map = mean_average_precision(&scores, &relevance)?;
            let per = if per_class {
                let mut rows = Vec::new();
                for c in 0..v.num_at() {
                    let col_s: Vec<f32> = scores.iter().map(|r| r[c]).collect();
                    let col_r: Vec<bool> = relevance.iter().map(|r| r[c]).collect();
                    if let Some(ap) = average_precision(&col_s, &col_r)? {
                        rows.push(PerClassRow {
                            label: v.label(c).to_string(),
                            value: ap,
                            n: col_r.iter().filter(|&&x| x).count(),
                        });
                    }
                }
                Some(rows)
            } else {
                None
            };
            Ok(EvalReport {
                task: task.name(),
                n_clips: entries.len(),
                n_chunks: entries.len(),
                decision_threshold: threshold,
                accuracy: None,
                mean_average_precision: Some(map),
                rejection_rate: None,
                per_class: per,
            })
        }
        EvalTask::Negative => {
            if v.num_kws() == 0 {
                return Err(Error::EmptyInput("keyword block"));
            }
            let clips = collect_chunked(model, entries, chunk_secs, false)?;
            let fired: Vec<bool> = clips.iter().map(|c| clip_fired(c, threshold)).collect();
            let rate = rejection_rate(&fired)?;
            let n_chunks = clips.iter().map(|c| c.chunks.len()).sum();
            let per = per_class.then(|| {
                let mut counts = vec![0usize; v.num_kws()];
                for clip in &clips {
                    for c in &clip.chunks {
                        if let Some((i, s)) = c.kws_best {
                            if s >= threshold {
                                counts[i - v.num_at()] += 1;
                            }
                        }
                    }
                }
                counts
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| PerClassRow {
                        label: v.kws_labels()[k].clone(),
                        value: n as f64,
                        n,
                    })
                    .collect()
            });
            Ok(EvalReport {
                task: task.name(),
                n_clips: clips.len(),
                n_chunks,
                decision_threshold: threshold,
                accuracy: None,
                mean_average_precision: None,
                rejection_rate: Some(rate),
                per_class: per,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub threshold: f32,
    pub value: f64,
}

/// Metric as a function of the decision threshold, over one scoring pass.
/// Keyword sets report accuracy, negative sets rejection rate; event sets
/// have no threshold to sweep.
pub fn threshold_sweep(
    model: &Model,
    entries: &[ManifestEntry],
    task: EvalTask,
    thresholds: &[f32],
    chunk_secs: f64,
) -> Result<Vec<SweepPoint>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("evaluation manifest"));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("threshold list"));
    }
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold {t} is not finite")));
    }
    match task {
        EvalTask::Event => Err(Error::InvalidArgument(
            "event evaluation has no decision threshold to sweep".into(),
        )),
        EvalTask::Keyword => {
            let clips = collect_chunked(model, entries, chunk_secs, true)?;
            thresholds
                .iter()
                .map(|&t| {
                    let (p, r) = keyword_accuracy(&clips, t)?;
                    Ok(SweepPoint { threshold: t, value: accuracy(&p, &r)? })
                })
                .collect()
        }
        EvalTask::Negative => {
            if model.vocab.num_kws() == 0 {
                return Err(Error::EmptyInput("keyword block"));
            }
            let clips = collect_chunked(model, entries, chunk_secs, false)?;
            Ok(thresholds
                .iter()
                .map(|&t| {
                    let fired: Vec<bool> =
                        clips.iter().map(|c| clip_fired(c, t)).collect();
                    SweepPoint {
                        threshold: t,
                        value: rejection_rate(&fired).expect("clips are non-empty"),
                    }
                })
                .collect())
        }
    }
}

/// Keeps the cached-sweep shortcut honest against the full decision rule.
#[cfg(test)]
pub(crate) fn summary_matches_decide(
    scores: &[f32],
    v: &LabelVocabulary,
    threshold: f32,
) -> bool {
    use crate::infer::{decide, Branch};
    let c = ChunkSummary {
        kws_best: best_in(scores, v.num_at(), v.len()),
        at_best: best_in(scores, 0, v.num_at()),
    };
    let via_summary = summary_decision(&c, threshold);
    let via_decide = decide(scores, v, threshold).map(|d| d.index);
    match (via_summary, via_decide) {
        (Ok(a), Ok(b)) => {
            let fired = matches!(decide(scores, v, threshold), Ok(d) if d.branch == Branch::Keyword);
            a == b && fired == c.kws_best.is_some_and(|(_, s)| s >= threshold)
        }
        (Err(_), Err(_)) => true,
        _ => false,
    }
}
