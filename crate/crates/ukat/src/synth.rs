//! Procedural audio corpus for end-to-end exercise of the pipeline.
//!
//! The generator builds a small world with the same shape as a real
//! keyword-plus-events workload, deterministic from one seed:
//!
//! * A `Speech` event: a harmonic voiced carrier with vibrato and a slow
//!   syllabic amplitude wobble.
//! * Keywords: short note melodies from an eight-note alphabet, mixed over
//!   the carrier, one melody per keyword.
//! * Out-of-vocabulary speech: carrier plus distractor melodies whose note
//!   sets stay nearly disjoint from every keyword's, drawn from a training
//!   pool and a held-out pool so rejection is measured on melodies the
//!   model has never heard.
//! * Non-speech events: amplitude-modulated tone textures at fixed,
//!   well-separated center frequencies.
//! * Negative streams: held-out melodies and off-grid textures with no
//!   carrier at all; nothing in them should wake a keyword.
//!
//! Audio is written as 16-bit PCM WAV next to line-oriented manifests and a
//! vocabulary file, everything addressed by paths relative to the output
//! directory.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::labels::{merge_vocabularies, LabelVocabulary, SPEECH_LABEL, UNKNOWN_LABEL};
use crate::manifest::{write_manifest, ManifestEntry, SourceTag};

const NOTE_COUNT: usize = 8;
// The alphabet sits strictly above the carrier's harmonic band so melody
// identity never blends into the voiced floor.
const NOTE_LOW_HZ: f64 = 1000.0;
const NOTE_HIGH_HZ: f64 = 3000.0;
const MELODY_LEN: usize = 4;
/// A distractor may share at most this many notes with any keyword.
const MAX_SHARED_NOTES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_keywords: usize,
    /// Non-speech event classes; `Speech` is always present on top.
    pub n_textures: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub eval_per_class: usize,
    pub sample_rate: u32,
    pub keyword_duration: f64,
    /// Length of eval-split keyword and out-of-vocabulary clips; defaults
    /// to `keyword_duration`. Letting training clips run longer than eval
    /// clips gives random cropping room to matter.
    pub eval_keyword_duration: Option<f64>,
    pub event_duration: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_keywords: 4,
            n_textures: 3,
            train_per_class: 12,
            val_per_class: 3,
            eval_per_class: 8,
            sample_rate: 16_000,
            keyword_duration: 1.0,
            eval_keyword_duration: None,
            event_duration: 6.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_keywords == 0 || self.n_textures == 0 {
            return Err(Error::Config("need at least one keyword and one texture class".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.eval_per_class == 0 {
            return Err(Error::Config("per-class clip counts must be positive".into()));
        }
        if self.sample_rate < 8_000 {
            return Err(Error::Config(format!(
                "sample rate {} is too low for the note alphabet",
                self.sample_rate
            )));
        }
        if !(self.keyword_duration > 0.0 && self.event_duration >= self.keyword_duration) {
            return Err(Error::Config(format!(
                "durations {} / {} out of order",
                self.keyword_duration, self.event_duration
            )));
        }
        let ekd = self.eval_keyword_secs();
        if !(ekd > 0.0 && ekd.is_finite()) {
            return Err(Error::Config(format!(
                "eval keyword duration {ekd} must be positive"
            )));
        }
        Ok(())
    }

    pub fn eval_keyword_secs(&self) -> f64 {
        self.eval_keyword_duration.unwrap_or(self.keyword_duration)
    }

    pub fn keyword_names(&self) -> Vec<String> {
        (0..self.n_keywords).map(|i| format!("kw{i}")).collect()
    }

    pub fn event_names(&self) -> Vec<String> {
        let mut names = vec![SPEECH_LABEL.to_string()];
        names.extend((0..self.n_textures).map(|j| format!("tex{j}")));
        names
    }

    pub fn vocabulary(&self) -> Result<LabelVocabulary> {
        merge_vocabularies(&self.event_names(), &self.keyword_names())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub vocab_file: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub eval_keyword_manifest: PathBuf,
    pub eval_event_manifest: PathBuf,
    pub eval_negative_manifest: PathBuf,
    pub n_files: usize,
}

fn note_freq(note: usize) -> f64 {
    NOTE_LOW_HZ * (NOTE_HIGH_HZ / NOTE_LOW_HZ).powf(note as f64 / (NOTE_COUNT - 1) as f64)
}

fn note_mask(melody: &[usize]) -> u8 {
    melody.iter().fold(0u8, |m, &n| m | (1 << n))
}

fn shared_notes(a: u8, b: u8) -> usize {
    (a & b).count_ones() as usize
}

/// Four distinct notes in random order.
fn draw_melody(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut notes: Vec<usize> = (0..NOTE_COUNT).collect();
    for i in (1..notes.len()).rev() {
        let j = rng.random_range(0..=i);
        notes.swap(i, j);
    }
    notes.truncate(MELODY_LEN);
    notes
}

/// Melodies whose note sets share at most `max_shared` notes with every
/// mask in `avoid`. With `mutually_distinct` the accepted melodies also
/// hold that bound against each other, which is what keeps keyword classes
/// apart; distractor pools skip it so the pool stays easy to fill. The
/// bound relaxes one note at a time if the draw budget runs dry, so
/// generation always terminates even for infeasible requests.
fn draw_melodies(
    rng: &mut ChaCha8Rng,
    count: usize,
    avoid: &[u8],
    mut max_shared: usize,
    mutually_distinct: bool,
    forbid_sequences: &mut Vec<Vec<usize>>,
) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut avoid: Vec<u8> = avoid.to_vec();
    let mut tries = 0usize;
    while out.len() < count {
        let m = draw_melody(rng);
        let mask = note_mask(&m);
        let ok = avoid.iter().all(|&a| shared_notes(a, mask) <= max_shared)
            && !forbid_sequences.contains(&m);
        tries += 1;
        if ok {
            if mutually_distinct {
                avoid.push(mask);
            }
            forbid_sequences.push(m.clone());
            out.push(m);
            tries = 0;
        } else if tries > 2_000 {
            max_shared = (max_shared + 1).min(MELODY_LEN);
            tries = 0;
        }
    }
    out
}

struct Mixer {
    samples: Vec<f64>,
    rate: f64,
}

impl Mixer {
    fn new(sample_rate: u32, duration: f64) -> Mixer {
        Mixer {
            samples: vec![0.0; (duration * sample_rate as f64).round() as usize],
            rate: sample_rate as f64,
        }
    }

    /// One tone with raised-cosine edges, added in place.
    fn add_tone(&mut self, freq: f64, amp: f64, start: f64, dur: f64, phase: f64) {
        let ramp = (0.01 * self.rate) as usize;
        let s0 = (start * self.rate) as usize;
        let n = (dur * self.rate) as usize;
        for k in 0..n {
            let i = s0 + k;
            if i >= self.samples.len() {
                break;
            }
            let env = if k < ramp {
                0.5 - 0.5 * (TAU / 2.0 * k as f64 / ramp as f64).cos()
            } else if k + ramp > n {
                0.5 - 0.5 * (TAU / 2.0 * (n - k) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            self.samples[i] += amp * env * (TAU * freq * k as f64 / self.rate + phase).sin();
        }
    }

    /// A melody placed at `start`, one note after another.
    fn add_melody(&mut self, melody: &[usize], amp: f64, start: f64, rng: &mut ChaCha8Rng) {
        let note_dur = 0.19;
        let gap = 0.01;
        for (k, &n) in melody.iter().enumerate() {
            self.add_tone(
                note_freq(n),
                amp,
                start + k as f64 * (note_dur + gap),
                note_dur,
                rng.random::<f64>() * TAU,
            );
        }
    }

    /// Voiced carrier: five harmonics over a wandering fundamental, vibrato,
    /// syllabic amplitude wobble. Harmonic energy stays below the note
    /// alphabet even at the highest fundamental.
    fn add_carrier(&mut self, amp: f64, rng: &mut ChaCha8Rng) {
        let f0 = 110.0 + 70.0 * rng.random::<f64>();
        let vib_rate = 4.0 + 2.0 * rng.random::<f64>();
        let syl_rate = 2.5 + 1.0 * rng.random::<f64>();
        let syl_phase = rng.random::<f64>() * TAU;
        let phases: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * TAU).collect();
        let mut arg = vec![0.0f64; 5];
        for i in 0..self.samples.len() {
            let t = i as f64 / self.rate;
            let f = f0 * (1.0 + 0.01 * (TAU * vib_rate * t).sin());
            let syl = 0.55 + 0.45 * (TAU * syl_rate * t + syl_phase).sin();
            let mut s = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                arg[h] += TAU * f * (h + 1) as f64 / self.rate;
                s += (arg[h] + ph).sin() / (h + 1) as f64;
            }
            self.samples[i] += amp * syl * s / 2.0;
        }
    }

    /// Three neighboring tones around a center, amplitude-modulated.
    fn add_texture(&mut self, center: f64, am_rate: f64, amp: f64, rng: &mut ChaCha8Rng) {
        let am_phase = rng.random::<f64>() * TAU;
        let phases: [f64; 3] = [
            rng.random::<f64>() * TAU,
            rng.random::<f64>() * TAU,
            rng.random::<f64>() * TAU,
        ];
        let freqs = [center * 0.92, center, center * 1.08];
        for i in 0..self.samples.len() {
            let t = i as f64 / self.rate;
            let am = 0.6 + 0.4 * (TAU * am_rate * t + am_phase).sin();
            let mut s = 0.0;
            for (f, ph) in freqs.iter().zip(&phases) {
                s += (TAU * f * t + ph).sin();
            }
            self.samples[i] += amp * am * s / 3.0;
        }
    }

    fn finish(self, sample_rate: u32) -> Result<Waveform> {
        let peak = self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
        Waveform::new(
            self.samples.iter().map(|&s| (s * scale) as f32).collect(),
            sample_rate,
        )
    }
}

/// Fixed texture grid: centers log-spaced across 400..5500 Hz, one slow
/// modulation rate per class.
fn texture_params(class: usize, n_classes: usize) -> (f64, f64) {
    let frac = if n_classes == 1 {
        0.5
    } else {
        class as f64 / (n_classes - 1) as f64
    };
    let center = 400.0 * (5500.0f64 / 400.0).powf(frac);
    let am_rate = 2.0 + 1.5 * class as f64;
    (center, am_rate)
}

struct World {
    keywords: Vec<Vec<usize>>,
    pool_seen: Vec<Vec<usize>>,
    pool_held_out: Vec<Vec<usize>>,
}

impl World {
    fn build(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> World {
        let mut taken: Vec<Vec<usize>> = Vec::new();
        let keywords =
            draw_melodies(rng, spec.n_keywords, &[], MAX_SHARED_NOTES, true, &mut taken);
        let kw_masks: Vec<u8> = keywords.iter().map(|m| note_mask(m)).collect();
        // The seen pool needs depth: with only a handful of distractors the
        // trainer memorizes them instead of learning the keyword boundary,
        // and fresh melodies at eval time land on the keyword side.
        let pool = 3 * spec.n_keywords + 3;
        let pool_seen =
            draw_melodies(rng, pool, &kw_masks, MAX_SHARED_NOTES, false, &mut taken);
        let pool_held_out = draw_melodies(
            rng,
            spec.n_keywords + 2,
            &kw_masks,
            MAX_SHARED_NOTES,
            false,
            &mut taken,
        );
        World { keywords, pool_seen, pool_held_out }
    }
}

#[derive(Clone, Copy)]
enum ClipKind<'a> {
    KeywordTarget(usize),
    OutOfVocab(&'a [Vec<usize>]),
    Speech(&'a [Vec<usize>]),
    Texture(usize),
    /// A texture class with distractor melodies on top and no carrier.
    /// Its keyword targets are all zero, which is what teaches the model
    /// not to fire on melodic content alone.
    MelodicTexture(usize, &'a [Vec<usize>]),
    NegativeStream(&'a [Vec<usize>]),
}

fn synth_clip(
    spec: &SynthSpec,
    world: &World,
    kind: &ClipKind,
    keyword_secs: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    let sr = spec.sample_rate;
    match *kind {
        ClipKind::KeywordTarget(k) => {
            // The melody must dominate the carrier or keyword clips collapse
            // toward the generic voiced spectrum.
            let mut mx = Mixer::new(sr, keyword_secs);
            mx.add_carrier(0.18, rng);
            let slack = (keyword_secs - 0.85).max(0.0);
            let start = rng.random::<f64>() * slack;
            mx.add_melody(&world.keywords[k], 0.45, start, rng);
            mx.finish(sr)
        }
        ClipKind::OutOfVocab(pool) => {
            let mut mx = Mixer::new(sr, keyword_secs);
            mx.add_carrier(0.18, rng);
            let m = &pool[rng.random_range(0..pool.len())];
            let slack = (keyword_secs - 0.85).max(0.0);
            let start = rng.random::<f64>() * slack;
            mx.add_melody(m, 0.45, start, rng);
            mx.finish(sr)
        }
        ClipKind::Speech(pool) => {
            let mut mx = Mixer::new(sr, spec.event_duration);
            mx.add_carrier(0.22, rng);
            let n_mel = 1 + rng.random_range(0..2u32) as usize;
            for _ in 0..n_mel {
                let m = &pool[rng.random_range(0..pool.len())];
                let start = rng.random::<f64>() * (spec.event_duration - 1.0).max(0.0);
                mx.add_melody(m, 0.26, start, rng);
            }
            mx.finish(sr)
        }
        ClipKind::Texture(j) => {
            let (center, am) = texture_params(j, spec.n_textures);
            let mut mx = Mixer::new(sr, spec.event_duration);
            // A little per-clip drift keeps clips distinct without leaving
            // the class's neighborhood.
            let center = center * (1.0 + 0.04 * (rng.random::<f64>() - 0.5));
            let am = am * (1.0 + 0.1 * (rng.random::<f64>() - 0.5));
            mx.add_texture(center, am, 0.5, rng);
            mx.finish(sr)
        }
        ClipKind::MelodicTexture(j, pool) => {
            // Melodies louder than the bed, as in the negative streams.
            // Faint distractors would let "strong melody" stay synonymous
            // with "keyword" and "voice".
            let (center, am) = texture_params(j, spec.n_textures);
            let mut mx = Mixer::new(sr, spec.event_duration);
            let center = center * (1.0 + 0.04 * (rng.random::<f64>() - 0.5));
            let am = am * (1.0 + 0.1 * (rng.random::<f64>() - 0.5));
            mx.add_texture(center, am, 0.35, rng);
            for _ in 0..2 {
                let m = &pool[rng.random_range(0..pool.len())];
                let start = rng.random::<f64>() * (spec.event_duration - 1.0).max(0.0);
                mx.add_melody(m, 0.40, start, rng);
            }
            mx.finish(sr)
        }
        ClipKind::NegativeStream(pool) => {
            // A familiar texture bed, melodies the training pool never
            // contained, and no carrier. The novelty lives in the melodies;
            // the bed stays within the trained noise family so rejection is
            // measured against fresh content, not an alien channel.
            let mut mx = Mixer::new(sr, spec.event_duration);
            let j = rng.random_range(0..spec.n_textures);
            let (center, am) = texture_params(j, spec.n_textures);
            let center = center * (1.0 + 0.04 * (rng.random::<f64>() - 0.5));
            let am = am * (1.0 + 0.1 * (rng.random::<f64>() - 0.5));
            mx.add_texture(center, am, 0.35, rng);
            for _ in 0..2 {
                let m = &pool[rng.random_range(0..pool.len())];
                let start = rng.random::<f64>() * (spec.event_duration - 1.0).max(0.0);
                mx.add_melody(m, 0.30, start, rng);
            }
            mx.finish(sr)
        }
    }
}

struct Emitter<'a> {
    spec: &'a SynthSpec,
    world: &'a World,
    out_dir: &'a Path,
    rng: ChaCha8Rng,
    n_files: usize,
}

impl Emitter<'_> {
    fn emit(
        &mut self,
        split: &str,
        stem: &str,
        index: usize,
        kind: &ClipKind,
        labels: Vec<String>,
        source: SourceTag,
    ) -> Result<ManifestEntry> {
        let rel = format!("audio/{split}_{stem}_{index:03}.wav");
        let keyword_secs = if split == "eval" {
            self.spec.eval_keyword_secs()
        } else {
            self.spec.keyword_duration
        };
        let wave = synth_clip(self.spec, self.world, kind, keyword_secs, &mut self.rng)?;
        wave.write_wav_pcm16(&self.out_dir.join(&rel))?;
        self.n_files += 1;
        Ok(ManifestEntry {
            audio: rel,
            labels,
            soft: None,
            split: split.to_string(),
            source,
        })
    }

    /// One batch of clips for every class, `per_class` each.
    fn class_sweep(&mut self, split: &str, per_class: usize) -> Result<Vec<ManifestEntry>> {
        let mut entries = Vec::new();
        let kw_names = self.spec.keyword_names();
        let world = self.world;
        for n in 0..per_class {
            for (k, name) in kw_names.iter().enumerate() {
                entries.push(self.emit(
                    split,
                    name,
                    n,
                    &ClipKind::KeywordTarget(k),
                    vec![name.clone()],
                    SourceTag::Kws,
                )?);
            }
            entries.push(self.emit(
                split,
                "unk",
                n,
                &ClipKind::OutOfVocab(&world.pool_seen),
                vec![UNKNOWN_LABEL.to_string()],
                SourceTag::Kws,
            )?);
            entries.push(self.emit(
                split,
                "speech",
                n,
                &ClipKind::Speech(&world.pool_seen),
                vec![SPEECH_LABEL.to_string()],
                SourceTag::At,
            )?);
            for j in 0..self.spec.n_textures {
                entries.push(self.emit(
                    split,
                    &format!("tex{j}"),
                    n,
                    &ClipKind::Texture(j),
                    vec![format!("tex{j}")],
                    SourceTag::At,
                )?);
            }
            // Keyword-free melodic clips keep the keyword outputs honest on
            // melody-bearing non-speech audio. Two per round so they are not
            // drowned out by the voiced majority.
            for i in 0..2 {
                let idx = 2 * n + i;
                let j = idx % self.spec.n_textures;
                entries.push(self.emit(
                    split,
                    "mtex",
                    idx,
                    &ClipKind::MelodicTexture(j, &world.pool_seen),
                    vec![format!("tex{j}")],
                    SourceTag::At,
                )?);
            }
        }
        Ok(entries)
    }
}

/// Generates the corpus into `out_dir` and returns where everything landed.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::build(spec, &mut rng);
    let mut em = Emitter {
        spec,
        world: &world,
        out_dir,
        rng,
        n_files: 0,
    };

    let train = em.class_sweep("train", spec.train_per_class)?;
    let val = em.class_sweep("val", spec.val_per_class)?;

    let mut eval_kws = Vec::new();
    for n in 0..spec.eval_per_class {
        for (k, name) in spec.keyword_names().iter().enumerate() {
            eval_kws.push(em.emit(
                "eval",
                name,
                n,
                &ClipKind::KeywordTarget(k),
                vec![name.clone()],
                SourceTag::Kws,
            )?);
        }
    }
    for n in 0..2 * spec.eval_per_class {
        eval_kws.push(em.emit(
            "eval",
            "unk",
            n,
            &ClipKind::OutOfVocab(&world.pool_held_out),
            vec![UNKNOWN_LABEL.to_string()],
            SourceTag::Kws,
        )?);
    }

    let mut eval_at = Vec::new();
    for n in 0..spec.eval_per_class {
        eval_at.push(em.emit(
            "eval",
            "speech",
            n,
            &ClipKind::Speech(&world.pool_seen),
            vec![SPEECH_LABEL.to_string()],
            SourceTag::At,
        )?);
        for j in 0..spec.n_textures {
            eval_at.push(em.emit(
                "eval",
                &format!("tex{j}"),
                n,
                &ClipKind::Texture(j),
                vec![format!("tex{j}")],
                SourceTag::At,
            )?);
        }
    }

    let mut eval_neg = Vec::new();
    for n in 0..2 * spec.eval_per_class {
        eval_neg.push(em.emit(
            "neg",
            "stream",
            n,
            &ClipKind::NegativeStream(&world.pool_held_out),
            vec![UNKNOWN_LABEL.to_string()],
            SourceTag::Kws,
        )?);
    }

    let n_files = em.n_files;
    let vocab = spec.vocabulary()?;
    let vocab_file = out_dir.join("vocab.txt");
    crate::labels::write_vocab_file(&vocab, &vocab_file)?;

    let write = |name: &str, entries: &[ManifestEntry]| -> Result<PathBuf> {
        let p = out_dir.join(name);
        write_manifest(&p, entries)?;
        Ok(p)
    };
    Ok(SynthSummary {
        vocab_file,
        train_manifest: write("train.jsonl", &train)?,
        val_manifest: write("val.jsonl", &val)?,
        eval_keyword_manifest: write("eval_kws.jsonl", &eval_kws)?,
        eval_event_manifest: write("eval_at.jsonl", &eval_at)?,
        eval_negative_manifest: write("eval_neg.jsonl", &eval_neg)?,
        n_files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_log_mel, FrontendConfig};
    use crate::manifest::load_manifest;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            seed: 11,
            n_keywords: 3,
            n_textures: 2,
            train_per_class: 3,
            val_per_class: 2,
            eval_per_class: 3,
            keyword_duration: 1.5,
            eval_keyword_duration: Some(1.0),
            event_duration: 3.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn note_grid_is_geometric_and_in_range() {
        assert!((note_freq(0) - 1000.0).abs() < 1e-9);
        assert!((note_freq(7) - 3000.0).abs() < 1e-9);
        let r = note_freq(1) / note_freq(0);
        for k in 1..8 {
            assert!((note_freq(k) / note_freq(k - 1) - r).abs() < 1e-9);
        }
    }

    #[test]
    fn melody_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SynthSpec::default();
        let w = World::build(&spec, &mut rng);
        assert_eq!(w.keywords.len(), spec.n_keywords);
        let kw_masks: Vec<u8> = w.keywords.iter().map(|m| note_mask(m)).collect();
        for (i, &a) in kw_masks.iter().enumerate() {
            for &b in &kw_masks[i + 1..] {
                assert!(shared_notes(a, b) <= MAX_SHARED_NOTES, "keywords too alike");
            }
        }
        for pool in [&w.pool_seen, &w.pool_held_out] {
            for m in pool.iter() {
                for &km in &kw_masks {
                    assert!(shared_notes(note_mask(m), km) <= MAX_SHARED_NOTES);
                }
                assert!(!w.keywords.contains(m));
            }
        }
        for m in &w.pool_seen {
            assert!(!w.pool_held_out.contains(m));
        }
    }

    #[test]
    fn generation_is_deterministic_and_complete() {
        let spec = small_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = generate(&spec, d1.path()).unwrap();
        let s2 = generate(&spec, d2.path()).unwrap();
        assert_eq!(s1.n_files, s2.n_files);

        let mut names: Vec<String> = std::fs::read_dir(d1.path().join("audio"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), s1.n_files);
        for n in &names {
            let a = std::fs::read(d1.path().join("audio").join(n)).unwrap();
            let b = std::fs::read(d2.path().join("audio").join(n)).unwrap();
            assert_eq!(a, b, "{n} differs between identical runs");
        }
        for f in ["train.jsonl", "val.jsonl", "eval_kws.jsonl", "eval_at.jsonl", "eval_neg.jsonl", "vocab.txt"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    #[test]
    fn manifests_resolve_and_clips_have_the_right_shape() {
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&spec, dir.path()).unwrap();

        let train = load_manifest(&s.train_manifest).unwrap();
        // Per round: keywords, one unknown, one speech, textures, and two
        // melodic textures.
        let per_round = spec.n_keywords + 4 + spec.n_textures;
        assert_eq!(train.len(), per_round * spec.train_per_class);

        let vocab = crate::labels::read_vocab_file(&s.vocab_file).unwrap();
        assert_eq!(vocab.num_kws(), spec.n_keywords);
        assert_eq!(vocab.num_at(), spec.n_textures + 1);

        for e in &train {
            let w = Waveform::from_wav_file(Path::new(&e.audio)).unwrap();
            assert_eq!(w.sample_rate(), spec.sample_rate);
            let expect = match e.source {
                SourceTag::Kws => spec.keyword_duration,
                SourceTag::At => spec.event_duration,
            };
            assert_eq!(w.len(), (expect * spec.sample_rate as f64) as usize);
            let peak = w.samples().iter().fold(0.0f32, |m, &s| m.max(s.abs()));
            assert!(peak > 0.05, "{}: silent clip", e.audio);
            assert!(peak <= 1.0, "{}: clipped", e.audio);
        }

        // Eval keyword clips follow their own duration knob.
        let eval_kws = load_manifest(&s.eval_keyword_manifest).unwrap();
        let eval_len = (spec.eval_keyword_secs() * spec.sample_rate as f64) as usize;
        for e in &eval_kws {
            let w = Waveform::from_wav_file(Path::new(&e.audio)).unwrap();
            assert_eq!(w.len(), eval_len, "{}", e.audio);
        }

        let neg = load_manifest(&s.eval_negative_manifest).unwrap();
        assert_eq!(neg.len(), 2 * spec.eval_per_class);
    }

    #[test]
    fn classes_are_separable_by_mean_spectrum_centroids() {
        // Nearest-centroid over time-averaged mel vectors is a crude
        // classifier with no learned parts; if it clears 90 percent on the
        // held-out clips, the corpus carries enough signal for a real model.
        let spec = SynthSpec {
            seed: 21,
            event_duration: 3.0,
            train_per_class: 6,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&spec, dir.path()).unwrap();
        let cfg = FrontendConfig::default();

        // Mean mel over three time segments, concatenated. Plain whole-clip
        // averaging erases note order, which is exactly what separates
        // keywords that share part of the alphabet.
        let mean_mel = |path: &str| -> Vec<f64> {
            let w = Waveform::from_wav_file(Path::new(path)).unwrap();
            let f = extract_log_mel(&w, &cfg).unwrap();
            let (nm, nt) = (f.n_mels(), f.n_frames());
            let mut out = vec![0.0f64; 3 * nm];
            for seg in 0..3 {
                let t0 = seg * nt / 3;
                let t1 = ((seg + 1) * nt / 3).max(t0 + 1);
                for t in t0..t1 {
                    for (m, a) in f.frame(t).iter().zip(out[seg * nm..].iter_mut()) {
                        *a += *m as f64;
                    }
                }
                let n = (t1 - t0) as f64;
                out[seg * nm..(seg + 1) * nm].iter_mut().for_each(|a| *a /= n);
            }
            out
        };
        let class_of = |e: &ManifestEntry| e.labels[0].clone();

        let train = load_manifest(&s.train_manifest).unwrap();
        let mut sums: std::collections::BTreeMap<String, (Vec<f64>, usize)> = Default::default();
        for e in &train {
            // Melodic-texture clips are rejection material, intentionally
            // astride two classes, and `unknown` is a pseudo-label with no
            // spectral identity; templates come from the pure exemplars.
            if e.audio.contains("_mtex_") || e.labels[0] == UNKNOWN_LABEL {
                continue;
            }
            let v = mean_mel(&e.audio);
            let slot = sums.entry(class_of(e)).or_insert_with(|| (vec![0.0; v.len()], 0));
            for (a, b) in slot.0.iter_mut().zip(&v) {
                *a += b;
            }
            slot.1 += 1;
        }
        let centroids: Vec<(String, Vec<f64>)> = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.iter().map(|x| x / n as f64).collect()))
            .collect();

        let mut total = 0usize;
        let mut hit = 0usize;
        let mut check = |entries: &[ManifestEntry], skip_unknown: bool| {
            for e in entries {
                if skip_unknown && e.labels[0] == UNKNOWN_LABEL {
                    continue;
                }
                let v = mean_mel(&e.audio);
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = b.1.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                total += 1;
                hit += (best.0 == class_of(e)) as usize;
            }
        };
        check(&load_manifest(&s.eval_keyword_manifest).unwrap(), true);
        check(&load_manifest(&s.eval_event_manifest).unwrap(), false);
        let rate = hit as f64 / total as f64;
        assert!(rate > 0.9, "nearest-centroid accuracy only {rate:.3} over {total} clips");
    }
}
