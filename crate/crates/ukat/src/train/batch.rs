//! Assembling feature matrices of unequal length into one input tensor.

use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::model::tensor::Tensor;

/// Stacks spectrograms into an `[n, 1, frames, mels]` tensor, padding every
/// clip to the longest one with `pad_value` frames (the log floor, so padding
/// reads as silence). Returns the tensor and each clip's true frame count.
pub fn pad_batch(specs: &[LogMelSpectrogram], pad_value: f32) -> Result<(Tensor<f32>, Vec<usize>)> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mels = specs[0].n_mels();
    for (i, s) in specs.iter().enumerate() {
        if s.n_mels() != mels {
            return Err(Error::Shape(format!(
                "clip {i} has {} mel bands, batch has {mels}",
                s.n_mels()
            )));
        }
    }
    let frames: Vec<usize> = specs.iter().map(|s| s.n_frames()).collect();
    let max_frames = *frames.iter().max().unwrap();
    let mut out = Tensor::full(&[specs.len(), 1, max_frames, mels], pad_value);
    let data = out.data_mut();
    for (i, s) in specs.iter().enumerate() {
        let dst = &mut data[i * max_frames * mels..][..s.n_frames() * mels];
        dst.copy_from_slice(s.data());
    }
    Ok((out, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;
    use crate::dsp::{extract_log_mel, FrontendConfig};

    fn spec_of(len: usize) -> LogMelSpectrogram {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(
            (0..len).map(|i| (i as f32 * 0.01).sin()).collect(),
            cfg.sample_rate,
        )
        .unwrap();
        extract_log_mel(&w, &cfg).unwrap()
    }

    #[test]
    fn copies_rows_and_pads_with_the_floor() {
        let cfg = FrontendConfig::default();
        let a = spec_of(16_000);
        let b = spec_of(8_000);
        let floor = cfg.log_floor();
        let (x, frames) = pad_batch(&[a.clone(), b.clone()], floor).unwrap();
        assert_eq!(x.shape(), &[2, 1, a.n_frames(), 64]);
        assert_eq!(frames, vec![a.n_frames(), b.n_frames()]);

        let plane = a.n_frames() * 64;
        assert_eq!(&x.data()[..plane], a.data());
        assert_eq!(&x.data()[plane..plane + b.n_frames() * 64], b.data());
        assert!(x.data()[plane + b.n_frames() * 64..].iter().all(|&v| v == floor));
    }

    #[test]
    fn single_clip_round_trips_exactly() {
        let a = spec_of(12_345);
        let (x, frames) = pad_batch(std::slice::from_ref(&a), -23.0).unwrap();
        assert_eq!(frames, vec![a.n_frames()]);
        assert_eq!(x.data(), a.data());
    }

    #[test]
    fn rejects_empty_and_mismatched_bands() {
        assert!(matches!(pad_batch(&[], 0.0), Err(Error::EmptyInput(_))));

        let a = spec_of(8_000);
        let mut cfg = FrontendConfig::default();
        cfg.n_mels = 32;
        let w = Waveform::new(vec![0.0; 8_000], cfg.sample_rate).unwrap();
        let b = extract_log_mel(&w, &cfg).unwrap();
        assert!(matches!(pad_batch(&[a, b], 0.0), Err(Error::Shape(_))));
    }
}
