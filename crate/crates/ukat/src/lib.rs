//! Unified keyword spotting and audio tagging.
//!
//! One multi-label classifier serves both jobs: the label space is the
//! concatenation of an audio-event vocabulary (which includes a generic
//! `Speech` class) and a keyword vocabulary. A single forward pass yields
//! per-label scores; a threshold on the keyword block decides whether the
//! utterance is a keyword hit or falls through to event tagging.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`audio`]: WAV input and output, resampling, the `Waveform` type
//! - [`dsp`]: log-mel spectrogram front end
//! - [`labels`]: merged vocabulary, target encoding
//! - [`manifest`]: JSON Lines dataset manifests
//! - [`model`]: depthwise-separable convolutional network, forward and
//!   backward passes, file format, output stripping
//! - [`train`]: BCE-with-logits loss, Adam, random cropping, soft
//!   teacher labels, the training loop with top-k checkpointing
//! - [`infer`]: chunked streaming decisions and event tagging
//! - [`metrics`]: accuracy, average precision, rejection rate
//! - [`eval`]: evaluation harness and report types
//! - [`synth`]: procedural audio corpus for end-to-end exercise
//!
//! Determinism is a design constraint throughout: every random choice is
//! drawn from one seeded generator, reductions run in a fixed order on a
//! single thread, and serialized outputs are byte-reproducible for a
//! given seed and input set.

pub mod audio;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod infer;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
