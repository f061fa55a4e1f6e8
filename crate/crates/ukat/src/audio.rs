//! Waveform container, WAV file input and output, sample rate conversion.
//!
//! Audio is mono `f32` in `[-1, 1]` at an explicit sample rate. Files are
//! RIFF WAV, either 16-bit PCM or 32-bit IEEE float; stereo input is folded
//! to mono by averaging the channels. Resampling is polyphase windowed-sinc
//! interpolation with a Kaiser window, exact rational position arithmetic,
//! and zero padding past the signal edges.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a known sample rate. Samples are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of the sample range `[start, start + len)`, zero-padded where it
    /// runs past the end.
    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let mut out = vec![0.0f32; len];
        if start < self.samples.len() {
            let n = len.min(self.samples.len() - start);
            out[..n].copy_from_slice(&self.samples[start..start + n]);
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pad up to `len` samples; a longer waveform is returned unchanged.
    pub fn padded_to(&self, len: usize) -> Waveform {
        if self.samples.len() >= len {
            return self.clone();
        }
        self.slice(0, len)
    }

    pub fn from_wav_file(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
        let spec = reader.spec();
        if spec.channels == 0 {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                message: "zero channels".into(),
            });
        }
        let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            (fmt, bits) => {
                return Err(Error::Wav {
                    path: path.to_path_buf(),
                    message: format!("unsupported sample format {fmt:?} at {bits} bits"),
                })
            }
        };
        let ch = spec.channels as usize;
        let samples = if ch == 1 {
            interleaved
        } else {
            interleaved
                .chunks(ch)
                .map(|frame| frame.iter().sum::<f32>() / ch as f32)
                .collect()
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Write as 16-bit PCM, clamping to `[-1, 1]`.
    pub fn write_wav_pcm16(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| wav_err(path, e))?;
        }
        writer.finalize().map_err(|e| wav_err(path, e))
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

const KAISER_BETA: f64 = 8.6;
const TAPS: usize = 32;
const HALF_WIDTH: f64 = (TAPS / 2) as f64;
const MAX_PHASE_TABLE: u64 = 8192;

/// Convert to `target_rate`. Equal rates return a bit-identical copy.
///
/// Output length is `round(len * target_rate / source_rate)`. Each output
/// sample is a 32-tap Kaiser-windowed sinc interpolation at the exact
/// rational input position; taps are normalized to unit DC gain and samples
/// beyond either edge read as zero.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    if w.is_empty() {
        return Err(Error::EmptyInput("resample"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }

    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let g = gcd(src, dst);
    let up = dst / g;
    let down = src / g;
    let out_len = ((w.len() as u64 * dst + src / 2) / src) as usize;

    // Anti-aliasing cutoff as a fraction of the input Nyquist rate.
    let fc = (dst as f64 / src as f64).min(1.0);
    let phase_table: Option<Vec<[f64; TAPS]>> = if up <= MAX_PHASE_TABLE {
        Some((0..up).map(|p| kernel(p as f64 / up as f64, fc)).collect())
    } else {
        None
    };

    let x = w.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let num = n * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let computed;
        let taps = match &phase_table {
            Some(t) => &t[phase as usize],
            None => {
                computed = kernel(phase as f64 / up as f64, fc);
                &computed
            }
        };
        let mut acc = 0.0f64;
        for (j, &t) in taps.iter().enumerate() {
            let i = base + j as i64 - (TAPS / 2 - 1) as i64;
            if i >= 0 && (i as usize) < x.len() {
                acc += t * x[i as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate)
}

/// Taps for one polyphase branch: windowed sinc evaluated at offsets
/// `j - (TAPS/2 - 1) - frac`, scaled to unit tap sum.
fn kernel(frac: f64, fc: f64) -> [f64; TAPS] {
    let mut taps = [0.0f64; TAPS];
    let mut sum = 0.0f64;
    for (j, t) in taps.iter_mut().enumerate() {
        let d = j as f64 - (TAPS / 2 - 1) as f64 - frac;
        *t = fc * sinc(fc * d) * kaiser(d / HALF_WIDTH);
        sum += *t;
    }
    if sum != 0.0 {
        for t in &mut taps {
            *t /= sum;
        }
    }
    taps
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kaiser(u: f64) -> f64 {
    if u.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Modified Bessel function of the first kind, order zero, by power series.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..=64 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize) -> Waveform {
        let samples = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin() as f32)
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn resample_equal_rates_is_bitwise_identity() {
        let w = sine(313.0, 16_000, 1234);
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.samples(), w.samples());
        assert_eq!(r.sample_rate(), 16_000);
    }

    #[test]
    fn resample_output_length_rounds() {
        let w = Waveform::new(vec![0.0; 1000], 44_100).unwrap();
        let r = resample(&w, 16_000).unwrap();
        // 1000 * 16000 / 44100 = 362.81..
        assert_eq!(r.len(), 363);

        let w = Waveform::new(vec![0.0; 32_000], 32_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap().len(), 16_000);
    }

    #[test]
    fn downsample_sine_tracks_reference_within_a_percent() {
        let w = sine(440.0, 48_000, 48_000);
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.len(), 16_000);
        let mut max_err = 0.0f64;
        for n in 64..r.len() - 64 {
            let want = (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin();
            max_err = max_err.max((r.samples()[n] as f64 - want).abs());
        }
        assert!(max_err < 0.01, "max error {max_err}");
    }

    #[test]
    fn upsample_sine_tracks_reference_within_a_percent() {
        let w = sine(440.0, 16_000, 16_000);
        let r = resample(&w, 48_000).unwrap();
        assert_eq!(r.len(), 48_000);
        let mut max_err = 0.0f64;
        for n in 192..r.len() - 192 {
            let want = (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 48_000.0).sin();
            max_err = max_err.max((r.samples()[n] as f64 - want).abs());
        }
        assert!(max_err < 0.01, "max error {max_err}");
    }

    #[test]
    fn fractional_ratio_resample_stays_accurate() {
        let w = sine(440.0, 44_100, 44_100);
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.len(), 16_000);
        let mut max_err = 0.0f64;
        for n in 64..r.len() - 64 {
            let want = (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin();
            max_err = max_err.max((r.samples()[n] as f64 - want).abs());
        }
        assert!(max_err < 0.01, "max error {max_err}");
    }

    #[test]
    fn resample_rejects_bad_inputs() {
        let w = Waveform::new(vec![0.1; 10], 16_000).unwrap();
        assert!(matches!(resample(&w, 0), Err(Error::InvalidArgument(_))));
        let empty = Waveform::new(vec![], 16_000).unwrap();
        assert!(matches!(resample(&empty, 8_000), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn waveform_construction_validates() {
        assert!(matches!(Waveform::new(vec![0.0], 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            Waveform::new(vec![0.0, f32::NAN], 16_000),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn slice_and_pad_zero_fill() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0], 8_000).unwrap();
        let s = w.slice(1, 4);
        assert_eq!(s.samples(), &[2.0, 3.0, 0.0, 0.0]);
        let p = w.padded_to(5);
        assert_eq!(p.samples(), &[1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(w.padded_to(2).samples(), w.samples());
        let past_end = w.slice(7, 2);
        assert_eq!(past_end.samples(), &[0.0, 0.0]);
    }

    #[test]
    fn wav_pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = sine(500.0, 16_000, 800);
        w.write_wav_pcm16(&path).unwrap();
        let r = Waveform::from_wav_file(&path).unwrap();
        assert_eq!(r.sample_rate(), 16_000);
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.5 / 32767.0, "{a} vs {b}");
        }
    }

    #[test]
    fn stereo_wav_folds_to_mono_mean() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(1000i16, 3000i16), (-2000, 2000), (0, 500)] {
            wr.write_sample(l).unwrap();
            wr.write_sample(r).unwrap();
        }
        wr.finalize().unwrap();
        let w = Waveform::from_wav_file(&path).unwrap();
        assert_eq!(w.len(), 3);
        let want = [2000.0 / 32768.0, 0.0, 250.0 / 32768.0];
        for (a, b) in w.samples().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn float32_wav_reads_directly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.25f32, -0.5, 0.875] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let w = Waveform::from_wav_file(&path).unwrap();
        assert_eq!(w.sample_rate(), 22_050);
        assert_eq!(w.samples(), &[0.25, -0.5, 0.875]);
    }

    #[test]
    fn unsupported_wav_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(10i8).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(Waveform::from_wav_file(&path), Err(Error::Wav { .. })));
    }

    #[test]
    fn missing_wav_file_reports_io_error() {
        let err = Waveform::from_wav_file(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
