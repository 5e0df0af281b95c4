//! Log-mel filter-bank features.

use std::sync::Arc;

use fcac_core::digest::Hasher;
use fcac_core::features::{FeatureError, FeatureMap};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// A mono clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    /// Energies are clamped to this value before the logarithm.
    pub log_floor: f64,
    /// Per-clip mean/variance normalization of the log energies.
    pub normalize: bool,
    /// Clips are padded or center-cropped to this length.
    pub duration_s: f64,
    pub f_min: f64,
    /// `sample_rate / 2` when unset.
    pub f_max: Option<f64>,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 64,
            window_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
            normalize: true,
            duration_s: 4.0,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl FbankConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn target_len(&self) -> usize {
        (self.sample_rate as f64 * self.duration_s).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    /// Frames produced for a clip of the target length.
    pub fn frames(&self) -> usize {
        (self.target_len() - self.window_len()) / self.hop_len() + 1
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.into()));
        if self.sample_rate == 0 || self.n_mels == 0 {
            return bad("sample_rate and n_mels must be positive");
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return bad("window and hop must span at least one sample");
        }
        if self.target_len() < self.window_len() {
            return bad("duration is shorter than one window");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max()) || self.f_max() > self.sample_rate as f64 / 2.0 {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        Ok(())
    }

    fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Hasher::new();
        h.str("fbank")
            .u64(self.sample_rate as u64)
            .u64(self.n_mels as u64)
            .f64(self.window_ms)
            .f64(self.hop_ms)
            .f64(self.log_floor)
            .u64(self.normalize as u64)
            .f64(self.duration_s)
            .f64(self.f_min)
            .f64(self.f_max());
        h.finish().short()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `[n_mels][n_fft / 2 + 1]`.
pub fn mel_filters(cfg: &FbankConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft() / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft() as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Zero-pads at the end or center-crops to `len` samples.
pub fn fit_length(samples: &[f64], len: usize) -> Vec<f64> {
    if samples.len() >= len {
        let start = (samples.len() - len) / 2;
        samples[start..start + len].to_vec()
    } else {
        let mut out = samples.to_vec();
        out.resize(len, 0.0);
        out
    }
}

/// Reusable extractor holding the FFT plan, window and filters.
pub struct FbankExtractor {
    cfg: FbankConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl FbankExtractor {
    pub fn new(cfg: FbankConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let n = cfg.window_len();
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft()),
            window,
            filters: mel_filters(&cfg),
            fingerprint: cfg.fingerprint(),
            cfg,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMap, FeatureError> {
        let cfg = &self.cfg;
        let win = cfg.window_len();
        if wave.samples.len() < win {
            return Err(FeatureError::TooShort {
                len: wave.samples.len(),
                window: win,
            });
        }
        if wave.sample_rate != cfg.sample_rate {
            return Err(FeatureError::InvalidConfig(format!(
                "clip sampled at {} Hz, extractor expects {} Hz",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let samples = fit_length(&wave.samples, cfg.target_len());
        let (frames, hop, n_fft) = (cfg.frames(), cfg.hop_len(), cfg.n_fft());
        let mut values = Vec::with_capacity(frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_fft / 2 + 1];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + win];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(if i < win { frame[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values.push(e.max(cfg.log_floor).ln());
            }
        }
        if cfg.normalize {
            normalize(&mut values);
        }
        Ok(FeatureMap::new(frames, cfg.n_mels, values, self.fingerprint))
    }
}

/// Zero mean, unit variance; a constant map becomes all zeros.
fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-9 * (1.0 + mean.abs()) { (*v - mean) / std } else { 0.0 };
    }
}

/// One-shot extraction; build an [`FbankExtractor`] to process many clips.
pub fn extract_fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<FeatureMap, FeatureError> {
    FbankExtractor::new(cfg.clone())?.extract(wave)
}
