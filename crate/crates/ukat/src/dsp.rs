//! Log-mel spectrogram front end.
//!
//! The pipeline is fixed-shape and allocation-predictable: frame the signal
//! with a periodic Hann window, take the magnitude-squared DFT, project onto
//! a triangular mel filterbank, then compress with `ln(x + eps)`.
//!
//! Frame count follows `(max(len, n_fft) - n_fft) / hop + 1`; an input
//! shorter than one window is zero-padded to exactly one frame. At the
//! default configuration (16 kHz, 512-point window, 160-sample hop, 64 mel
//! bins) one second of audio maps to a 97 x 64 feature matrix.
//!
//! Mel triangles are computed against the continuous bin frequencies
//! `k * sample_rate / n_fft` on the HTK mel scale, without area
//! normalization, spanning `[f_min, f_max]`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            n_fft: 512,
            hop: 160,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
            log_eps: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("frontend: sample rate must be positive".into()));
        }
        if self.n_fft < 2 {
            return Err(Error::Config("frontend: n_fft must be at least 2".into()));
        }
        if self.hop == 0 {
            return Err(Error::Config("frontend: hop must be positive".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("frontend: n_mels must be positive".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::Config(format!(
                "frontend: need 0 <= f_min < f_max, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "frontend: f_max {} exceeds Nyquist {}",
                self.f_max,
                self.sample_rate as f64 / 2.0
            )));
        }
        if !(self.log_eps > 0.0 && self.log_eps.is_finite()) {
            return Err(Error::Config("frontend: log_eps must be positive and finite".into()));
        }
        Ok(())
    }

    /// Value a silent frame compresses to: `ln(log_eps)`.
    pub fn log_floor(&self) -> f32 {
        self.log_eps.ln() as f32
    }

    pub fn frame_hop_secs(&self) -> f32 {
        self.hop as f32 / self.sample_rate as f32
    }

    /// Frames produced for `len` input samples; short input pads to one frame.
    pub fn num_frames(&self, len: usize) -> usize {
        (len.max(self.n_fft) - self.n_fft) / self.hop + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Dense `n_mels x n_bins`, row-major.
    weights: Vec<f32>,
    /// Per row, the half-open bin range holding its nonzero weights.
    support: Vec<(usize, usize)>,
    center_freqs: Vec<f64>,
}

impl MelFilterbank {
    pub fn build(n_fft: usize, n_mels: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let cfg = FrontendConfig {
            sample_rate,
            n_fft,
            n_mels,
            f_min,
            f_max,
            ..FrontendConfig::default()
        };
        cfg.validate()?;

        let n_bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
        let hz_points: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(mel_lo + step * i as f64)).collect();

        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0f32; n_mels * n_bins];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            let mut first = n_bins;
            let mut last = 0;
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let rise = (f - lo) / (center - lo);
                let fall = (hi - f) / (hi - center);
                let v = rise.min(fall).max(0.0);
                if v > 0.0 {
                    *w = v as f32;
                    if k < first {
                        first = k;
                    }
                    last = k + 1;
                }
            }
            if first >= last {
                return Err(Error::Config(format!(
                    "mel filter {m} has no positive weight; raise n_fft or lower n_mels"
                )));
            }
            support.push((first, last));
        }

        Ok(MelFilterbank {
            n_mels,
            n_bins,
            weights,
            support,
            center_freqs: hz_points[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f32 {
        self.weights[mel * self.n_bins + bin]
    }

    pub fn row(&self, mel: usize) -> &[f32] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    /// Triangle peak frequencies in Hz, one per mel row.
    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    /// Mel-weighted energy per row for one power spectrum, accumulated in f64.
    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for m in 0..self.n_mels {
            let (a, b) = self.support[m];
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            let mut acc = 0.0f64;
            for k in a..b {
                acc += row[k] as f64 * power[k];
            }
            out[m] = acc;
        }
    }
}

/// Feature matrix: `n_frames x n_mels`, row-major, natural-log compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    n_frames: usize,
    n_mels: usize,
    frame_hop_secs: f32,
    data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame_hop_secs(&self) -> f32 {
        self.frame_hop_secs
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.data[t * self.n_mels + m]
    }
}

/// Reusable extraction state: window, filterbank, FFT plan.
pub struct FeatureExtractor {
    cfg: FrontendConfig,
    window: Vec<f32>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f32>>,
}

impl FeatureExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = MelFilterbank::build(cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.f_min, cfg.f_max)?;
        // Periodic Hann: 0.5 * (1 - cos(2 pi n / N)).
        let window: Vec<f32> = (0..cfg.n_fft)
            .map(|n| {
                let x = 2.0 * std::f64::consts::PI * n as f64 / cfg.n_fft as f64;
                (0.5 * (1.0 - x.cos())) as f32
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(FeatureExtractor {
            cfg: cfg.clone(),
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, w: &Waveform) -> Result<LogMelSpectrogram> {
        if w.is_empty() {
            return Err(Error::EmptyInput("feature extraction"));
        }
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "waveform is {} Hz but the front end expects {} Hz; resample first",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }

        let n_fft = self.cfg.n_fft;
        let n_bins = n_fft / 2 + 1;
        let n_frames = self.cfg.num_frames(w.len());
        let samples = w.samples();
        let log_floor = self.cfg.log_floor();

        let mut buf = vec![Complex::new(0.0f32, 0.0f32); n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0f32); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_bins];
        let mut mel = vec![0.0f64; self.cfg.n_mels];
        let mut data = Vec::with_capacity(n_frames * self.cfg.n_mels);

        for t in 0..n_frames {
            let start = t * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = samples.get(start + i).copied().unwrap_or(0.0);
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, p) in power.iter_mut().enumerate() {
                let c = buf[k];
                *p = (c.re as f64).powi(2) + (c.im as f64).powi(2);
            }
            self.filterbank.apply(&power, &mut mel);
            for &e in &mel {
                let v = (e + self.cfg.log_eps).ln() as f32;
                data.push(v.max(log_floor));
            }
        }

        Ok(LogMelSpectrogram {
            n_frames,
            n_mels: self.cfg.n_mels,
            frame_hop_secs: self.cfg.frame_hop_secs(),
            data,
        })
    }
}

/// One-shot extraction; builds a throwaway [`FeatureExtractor`].
pub fn extract_log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    FeatureExtractor::new(cfg)?.extract(w)
}
