//! The training loop and its supporting parts.
//!
//! One run is fully determined by the configuration: weight initialization
//! draws from a stream seeded with `seed`, while shuffling and crop placement
//! draw from a second stream salted off the same value. Data order, batch
//! assembly, and parameter updates are all single-threaded, so two runs with
//! equal inputs produce byte-identical checkpoints.

pub mod adam;
pub mod batch;
pub mod bce;
pub mod crop;
pub mod psl;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batch::pad_batch;
pub use bce::bce_with_logits;
pub use crop::{crop_samples, random_crop};
pub use psl::TeacherScorer;

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform};
use crate::dsp::{FeatureExtractor, FrontendConfig, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::labels::{encode_targets, LabelVocabulary};
use crate::manifest::{ManifestEntry, SourceTag};
use crate::metrics::mean_average_precision;
use crate::model::net::{build_model, ArchitectureConfig, Parameters};
use crate::model::tensor::Tensor;
use crate::model::{features_to_tensor, save_model, Model};

/// Decorrelates the data-order stream from the weight-init stream.
const DATA_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay; 1.0 keeps the rate flat.
    pub lr_decay: f64,
    pub crop_duration: f64,
    /// When off, keyword clips are zero-padded to `pad_duration` instead of
    /// cropped, and event clips pass through at native length.
    pub random_crop: bool,
    pub pad_duration: f64,
    /// When on, event-clip targets come from a teacher model instead of the
    /// manifest, and a teacher must be supplied.
    pub soft_labels: bool,
    pub speech_on_target: bool,
    pub checkpoint_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            max_epochs: 500,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            crop_duration: 1.0,
            random_crop: true,
            pad_duration: 10.0,
            soft_labels: true,
            speech_on_target: true,
            checkpoint_top_k: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.checkpoint_top_k == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, and checkpoint_top_k must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} out of range",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        for (name, v) in [("crop_duration", self.crop_duration), ("pad_duration", self.pad_duration)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        Ok(())
    }
}

pub struct TrainInputs<'a> {
    pub arch: &'a ArchitectureConfig,
    pub frontend: &'a FrontendConfig,
    pub vocab: &'a LabelVocabulary,
    /// Entries with audio paths already resolved against their manifest.
    pub train_entries: &'a [ManifestEntry],
    pub val_entries: &'a [ManifestEntry],
    pub teacher: Option<Model>,
    pub checkpoint_dir: &'a Path,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub epoch: usize,
    pub val_map: f64,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRanking {
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Best first; mirrors `ranking.json` in the checkpoint directory.
    pub ranking: Vec<CheckpointEntry>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Retains the best `k` epochs by validation score, higher first, earlier
/// epoch winning ties. A newcomer must strictly beat the current worst.
#[derive(Debug)]
pub struct TopK {
    k: usize,
    entries: Vec<(usize, f64)>,
}

#[derive(Debug, PartialEq)]
pub enum Offer {
    Kept { evicted: Option<usize> },
    Rejected,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        assert!(k > 0);
        TopK { k, entries: Vec::new() }
    }

    pub fn offer(&mut self, epoch: usize, score: f64) -> Offer {
        if self.entries.len() == self.k && score <= self.entries.last().unwrap().1 {
            return Offer::Rejected;
        }
        self.entries.push((epoch, score));
        self.entries
            .sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let evicted = if self.entries.len() > self.k {
            Some(self.entries.pop().unwrap().0)
        } else {
            None
        };
        Offer::Kept { evicted }
    }

    /// `(epoch, score)` pairs, best first.
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

fn checkpoint_file(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ukat")
}

/// In-place Fisher-Yates. Hand-rolled so the permutation depends only on
/// the generator's output sequence, not on a shuffle implementation that
/// may change between library versions.
fn shuffle<R: RngExt>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

fn as_diverged(epoch: usize, err: Error) -> Error {
    match err {
        Error::Numeric(message) => Error::Diverged { epoch, message },
        other => other,
    }
}

/// Features and targets that are identical every epoch (crops disabled).
struct StaticEpochData {
    specs: Vec<LogMelSpectrogram>,
    targets: Vec<Vec<f32>>,
}

pub fn train(cfg: &TrainConfig, inputs: TrainInputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    inputs.frontend.validate()?;
    if inputs.train_entries.is_empty() {
        return Err(Error::EmptyInput("training manifest"));
    }
    if inputs.val_entries.is_empty() {
        return Err(Error::EmptyInput("validation manifest"));
    }

    let vocab = inputs.vocab;
    let scorer = match (cfg.soft_labels, inputs.teacher) {
        (true, Some(m)) => Some(TeacherScorer::new(m, vocab)?),
        (true, None) => {
            return Err(Error::Config(
                "soft_labels is on but no teacher model was given".into(),
            ))
        }
        (false, _) => None,
    };
    let extractor = FeatureExtractor::new(inputs.frontend)?;
    let rate = inputs.frontend.sample_rate;
    let log_floor = inputs.frontend.log_floor();
    let pad_samples = crop_samples(rate, cfg.pad_duration)?;
    crop_samples(rate, cfg.crop_duration)?;

    let mut waves = Vec::with_capacity(inputs.train_entries.len());
    for e in inputs.train_entries {
        let w = Waveform::from_wav_file(Path::new(&e.audio))?;
        waves.push(resample(&w, rate)?);
    }

    // Targets that never change across epochs. Event entries under a teacher
    // are scored per crop instead.
    let mut fixed_targets: Vec<Option<Vec<f32>>> = Vec::with_capacity(waves.len());
    for e in inputs.train_entries {
        let fixed = match (&scorer, e.source) {
            (Some(_), SourceTag::At) => None,
            _ => Some(encode_targets(e, vocab, cfg.speech_on_target)?),
        };
        fixed_targets.push(fixed);
    }

    // With crops off every epoch sees the same view of each clip, so both
    // features and teacher targets can be computed once.
    let static_data: Option<StaticEpochData> = if cfg.random_crop {
        None
    } else {
        let mut specs = Vec::with_capacity(waves.len());
        let mut targets = Vec::with_capacity(waves.len());
        for (i, e) in inputs.train_entries.iter().enumerate() {
            let view = match e.source {
                SourceTag::Kws => waves[i].padded_to(pad_samples.max(waves[i].len())),
                SourceTag::At => waves[i].clone(),
            };
            specs.push(extractor.extract(&view)?);
            targets.push(match &fixed_targets[i] {
                Some(t) => t.clone(),
                None => scorer.as_ref().unwrap().soft_targets(&view)?,
            });
        }
        Some(StaticEpochData { specs, targets })
    };

    let mut val_feats = Vec::with_capacity(inputs.val_entries.len());
    let mut val_relevance = Vec::with_capacity(inputs.val_entries.len());
    for e in inputs.val_entries {
        let w = resample(&Waveform::from_wav_file(Path::new(&e.audio))?, rate)?;
        val_feats.push(extractor.extract(&w)?);
        let y = encode_targets(e, vocab, cfg.speech_on_target)?;
        val_relevance.push(y.iter().map(|&t| t > 0.5).collect::<Vec<bool>>());
    }

    let mut params = build_model(inputs.arch, vocab, cfg.seed)?;
    let mut adam_state = AdamState::new();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM_SALT);

    std::fs::create_dir_all(inputs.checkpoint_dir)
        .map_err(|e| Error::io(inputs.checkpoint_dir, e))?;
    let mut topk = TopK::new(cfg.checkpoint_top_k);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut order: Vec<usize> = (0..waves.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let adam_cfg = AdamConfig {
            learning_rate: cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1),
            ..AdamConfig::default()
        };
        shuffle(&mut order, &mut data_rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut specs = Vec::with_capacity(chunk.len());
            let mut flat = Vec::with_capacity(chunk.len() * vocab.len());
            for &i in chunk {
                match &static_data {
                    Some(s) => {
                        specs.push(s.specs[i].clone());
                        flat.extend_from_slice(&s.targets[i]);
                    }
                    None => {
                        let view = random_crop(&waves[i], cfg.crop_duration, &mut data_rng)?;
                        let y = match &fixed_targets[i] {
                            Some(t) => t.clone(),
                            None => scorer.as_ref().unwrap().soft_targets(&view)?,
                        };
                        specs.push(extractor.extract(&view)?);
                        flat.extend_from_slice(&y);
                    }
                }
            }
            let (x, _) = pad_batch(&specs, log_floor)?;
            let y = Tensor::from_vec(&[chunk.len(), vocab.len()], flat);

            let (logits, cache) = params.forward_train(&x)?;
            let (loss, dlogits) =
                bce_with_logits(&logits, &y).map_err(|e| as_diverged(epoch, e))?;
            let grads = params.backward(&cache, &dlogits)?;
            adam_step(&mut params, &grads, &mut adam_state, &adam_cfg)
                .map_err(|e| as_diverged(epoch, e))?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        // Non-finite validation scores are the same collapse as a non-finite
        // training loss; report them the same way.
        let val_map = validation_map(&params, &val_feats, &val_relevance)
            .map_err(|e| as_diverged(epoch, e))?;
        log::info!("epoch {epoch}: loss {train_loss:.6}, validation mAP {val_map:.4}");
        records.push(EpochRecord { epoch, train_loss, val_map });

        if let Offer::Kept { evicted } = topk.offer(epoch, val_map) {
            let snapshot = Model {
                params: params.clone(),
                vocab: vocab.clone(),
                frontend: inputs.frontend.clone(),
            };
            save_model(&snapshot, &inputs.checkpoint_dir.join(checkpoint_file(epoch)))?;
            if let Some(old) = evicted {
                let stale = inputs.checkpoint_dir.join(checkpoint_file(old));
                std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
            write_ranking(inputs.checkpoint_dir, &topk)?;
        }
    }

    let ranking = ranking_entries(&topk);
    Ok(TrainOutcome {
        initial_loss: records.first().map(|r| r.train_loss).unwrap(),
        final_loss: records.last().map(|r| r.train_loss).unwrap(),
        epochs: records,
        ranking,
    })
}

fn validation_map(
    params: &Parameters<f32>,
    feats: &[LogMelSpectrogram],
    relevance: &[Vec<bool>],
) -> Result<f64> {
    let mut scores = Vec::with_capacity(feats.len());
    for f in feats {
        let x = features_to_tensor(std::slice::from_ref(f));
        let logits = params.forward_eval(&x)?;
        scores.push(crate::model::layers::sigmoid(&logits).data().to_vec());
    }
    mean_average_precision(&scores, relevance)
}

fn ranking_entries(topk: &TopK) -> Vec<CheckpointEntry> {
    topk.entries()
        .iter()
        .map(|&(epoch, val_map)| CheckpointEntry {
            epoch,
            val_map,
            file: checkpoint_file(epoch),
        })
        .collect()
}

fn write_ranking(dir: &Path, topk: &TopK) -> Result<()> {
    let ranking = CheckpointRanking { checkpoints: ranking_entries(topk) };
    let path = dir.join("ranking.json");
    let mut text = serde_json::to_string_pretty(&ranking).expect("ranking serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Best-first checkpoint list from a run's checkpoint directory.
pub fn read_ranking(dir: &Path) -> Result<CheckpointRanking> {
    let path: PathBuf = dir.join("ranking.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
