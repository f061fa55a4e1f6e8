//! Soft targets for sound-event clips, produced by a frozen teacher model.
//!
//! The teacher runs with its own frontend and vocabulary; its scores are
//! gathered by label name into the student's event block. Keyword slots stay
//! at zero, since event corpora carry no keyword annotations.

use crate::audio::{resample, Waveform};
use crate::dsp::FeatureExtractor;
use crate::error::{Error, Result};
use crate::labels::LabelVocabulary;
use crate::model::Model;

pub struct TeacherScorer {
    model: Model,
    extractor: FeatureExtractor,
    /// Student event slot -> teacher output index.
    mapping: Vec<usize>,
    student_len: usize,
}

impl TeacherScorer {
    /// Wraps a teacher, checking up front that it scores every event label
    /// the student needs.
    pub fn new(model: Model, student: &LabelVocabulary) -> Result<Self> {
        let mut mapping = Vec::with_capacity(student.num_at());
        for name in student.at_labels() {
            match model.vocab.index_of(name) {
                Some(i) => mapping.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "teacher model does not score event label {name:?}"
                    )))
                }
            }
        }
        let extractor = FeatureExtractor::new(&model.frontend)?;
        Ok(Self {
            model,
            extractor,
            mapping,
            student_len: student.len(),
        })
    }

    pub fn teacher(&self) -> &Model {
        &self.model
    }

    /// Target vector for one clip: teacher scores in the event block, zeros
    /// in the keyword block. The clip is resampled whenever the teacher's
    /// rate differs, so callers can hand over crops at the student's rate.
    pub fn soft_targets(&self, clip: &Waveform) -> Result<Vec<f32>> {
        let rate = self.model.frontend.sample_rate;
        let scores = if clip.sample_rate() == rate {
            self.score(clip)?
        } else {
            self.score(&resample(clip, rate)?)?
        };
        let mut out = vec![0.0f32; self.student_len];
        for (slot, &ti) in self.mapping.iter().enumerate() {
            out[slot] = scores[ti];
        }
        Ok(out)
    }

    fn score(&self, clip: &Waveform) -> Result<Vec<f32>> {
        let features = self.extractor.extract(clip)?;
        self.model.predict(&features)
    }
}
