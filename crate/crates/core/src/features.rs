//! Log power spectral density summaries.
//!
//! Welch estimate with a periodic Hann window, 50% overlap and one-sided
//! density scaling. With 64-sample segments at 128 Hz this yields 33 bins
//! from 0 to 64 Hz. The signal mean is removed once before segmenting.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservationBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment: usize,
    pub overlap: usize,
    /// Power values are clamped to this floor before taking the log.
    pub log_floor: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment: 64,
            overlap: 32,
            log_floor: 1e-20,
        }
    }
}

impl WelchConfig {
    pub fn n_bins(&self) -> usize {
        self.segment / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdFeatures {
    pub values: Vec<f64>,
    pub freqs: Vec<f64>,
    /// Set when the signal had no power at all and every value is the floor.
    pub degenerate: bool,
}

pub fn log_psd(x: &[f64], fs: f64, cfg: &WelchConfig) -> Result<PsdFeatures> {
    let m = cfg.segment;
    if m < 2 || cfg.overlap >= m {
        return Err(Error::Config(format!("invalid Welch configuration {cfg:?}")));
    }
    if x.len() < m {
        return Err(Error::invalid(format!(
            "signal of length {} shorter than the segment length {m}",
            x.len()
        )));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid(format!("sampling rate {fs} must be positive")));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let window: Vec<f64> = (0..m)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / m as f64).cos())
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(m);
    let n_bins = cfg.n_bins();
    let mut power = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    let hop = m - cfg.overlap;
    let mut n_seg = 0usize;
    let mut start = 0;
    while start + m <= x.len() {
        for (b, (&v, &w)) in buf.iter_mut().zip(x[start..start + m].iter().zip(&window)) {
            *b = Complex::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
        n_seg += 1;
        start += hop;
    }

    let scale = 1.0 / (fs * win_energy * n_seg as f64);
    let nyquist = if m.is_multiple_of(2) { Some(m / 2) } else { None };
    let degenerate = power.iter().all(|&p| p == 0.0);
    let values = power
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
            (p * scale * one_sided).max(cfg.log_floor).ln()
        })
        .collect();
    let freqs = (0..n_bins).map(|k| k as f64 * fs / m as f64).collect();
    Ok(PsdFeatures {
        values,
        freqs,
        degenerate,
    })
}

/// Features of every series in a bundle, structure preserved.
pub fn featurize_bundle(bundle: &ObservationBundle, fs: f64, cfg: &WelchConfig) -> Result<ObservationBundle> {
    let len = bundle.x0.len();
    if let Some(bad) = bundle.extra.iter().find(|s| s.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: bad.len(),
        });
    }
    let x0 = log_psd(&bundle.x0, fs, cfg)?.values;
    let extra = bundle
        .extra
        .iter()
        .map(|s| log_psd(s, fs, cfg).map(|f| f.values))
        .collect::<Result<Vec<_>>>()?;
    ObservationBundle::new(x0, extra)
}
