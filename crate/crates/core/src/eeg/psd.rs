//! Welch power spectral density and band-power integration.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::DspError;
use crate::types::FrequencyBand;

pub const WELCH_WINDOW: usize = 256;

/// One-sided PSD, one density row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub fs: f64,
    pub window_len: usize,
    pub overlap: f64,
    pub window_fn: &'static str,
    pub freqs_hz: Vec<f64>,
    pub density: Vec<Vec<f64>>,
}

impl PsdEstimate {
    pub fn resolution_hz(&self) -> f64 {
        self.fs / self.window_len as f64
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

struct Welch {
    window: Vec<f64>,
    scale: f64,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Welch {
    fn new(fs: f64) -> Self {
        let window = hann(WELCH_WINDOW);
        let power: f64 = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(WELCH_WINDOW);
        Welch { window, scale: 1.0 / (fs * power), fft }
    }

    fn density(&self, x: &[f64]) -> Vec<f64> {
        let n = WELCH_WINDOW;
        let hop = n / 2;
        let n_bins = n / 2 + 1;
        let mut acc = vec![0.0; n_bins];
        let n_segments = (x.len() - n) / hop + 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for seg in 0..n_segments {
            let chunk = &x[seg * hop..seg * hop + n];
            let mean = chunk.iter().sum::<f64>() / n as f64;
            for ((b, v), w) in buf.iter_mut().zip(chunk).zip(&self.window) {
                *b = Complex64::new((v - mean) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b.norm_sqr();
            }
        }
        for (k, a) in acc.iter_mut().enumerate() {
            *a *= self.scale / n_segments as f64;
            if k != 0 && k != n_bins - 1 {
                *a *= 2.0;
            }
        }
        acc
    }
}

/// Welch PSD: Hann window of 256 samples, 50% overlap, per-segment mean removal.
/// A trailing partial segment is discarded.
pub fn welch_psd(signal: &[f64], fs: f64) -> Result<PsdEstimate, DspError> {
    welch_psd_channels(&[signal], fs)
}

pub fn welch_psd_channels<S: AsRef<[f64]>>(channels: &[S], fs: f64) -> Result<PsdEstimate, DspError> {
    let welch = Welch::new(fs);
    let mut density = Vec::with_capacity(channels.len());
    for ch in channels {
        let x = ch.as_ref();
        if x.len() < WELCH_WINDOW {
            return Err(DspError::TooShort { len: x.len(), min: WELCH_WINDOW });
        }
        density.push(welch.density(x));
    }
    let df = fs / WELCH_WINDOW as f64;
    Ok(PsdEstimate {
        fs,
        window_len: WELCH_WINDOW,
        overlap: 0.5,
        window_fn: "hann",
        freqs_hz: (0..=WELCH_WINDOW / 2).map(|k| k as f64 * df).collect(),
        density,
    })
}

/// Exact integral of the piecewise-linear interpolant of `density` over `[lo, hi]`.
pub fn integrate_density(freqs: &[f64], density: &[f64], lo: f64, hi: f64) -> f64 {
    let interp = |i: usize, f: f64| {
        let t = (f - freqs[i]) / (freqs[i + 1] - freqs[i]);
        density[i] + t * (density[i + 1] - density[i])
    };
    let mut total = 0.0;
    for i in 0..freqs.len() - 1 {
        let a = freqs[i].max(lo);
        let b = freqs[i + 1].min(hi);
        if b > a {
            total += 0.5 * (b - a) * (interp(i, a) + interp(i, b));
        }
    }
    total
}

/// Power per channel inside `band`.
pub fn band_power(psd: &PsdEstimate, band: &FrequencyBand) -> Result<Vec<f64>, DspError> {
    let nyquist = psd.fs / 2.0;
    if band.lo_hz < 0.0 || band.hi_hz > nyquist || band.lo_hz >= band.hi_hz {
        return Err(DspError::BandOutOfRange { lo_hz: band.lo_hz, hi_hz: band.hi_hz, nyquist });
    }
    Ok(psd
        .density
        .iter()
        .map(|d| integrate_density(&psd.freqs_hz, d, band.lo_hz, band.hi_hz))
        .collect())
}
