//! EEG preprocessing and feature extraction.
//!
//! Per trial: the epoch from 2 s before onset to the response is band-passed
//! (zero-phase Butterworth, 0.5-40 Hz), baseline-corrected against its first
//! 2 s, and the stimulus part is summarised by time-domain statistics and
//! Welch band powers.

pub mod filter;
pub mod psd;

use thiserror::Error;

pub use filter::{butterworth_bandpass, design_bandpass, filtfilt, FilterSpec, Sos};
pub use psd::{band_power, integrate_density, welch_psd, welch_psd_channels, PsdEstimate, WELCH_WINDOW};

use crate::stats::summary;
use crate::types::{canonical_bands, ChannelLayout, EegRecording, Trial, N_CHANNELS};

pub const BASELINE_SECONDS: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("series too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("invalid band-pass {lo_hz}-{hi_hz} Hz at fs = {fs} Hz")]
    InvalidFilter { lo_hz: f64, hi_hz: f64, fs: f64 },
    #[error("unstable filter design: pole magnitude {pole_magnitude}")]
    UnstableDesign { pole_magnitude: f64 },
    #[error("baseline has {got} samples, expected {expected}")]
    BaselineLengthMismatch { expected: usize, got: usize },
    #[error("band {lo_hz}-{hi_hz} Hz outside [0, {nyquist}] Hz")]
    BandOutOfRange { lo_hz: f64, hi_hz: f64, nyquist: f64 },
    #[error("trial {trial_id}: window [{start}, {end}) outside recording of {n_samples} samples")]
    WindowOutOfBounds { trial_id: String, start: i64, end: i64, n_samples: usize },
    #[error("channel count mismatch: {0}")]
    ChannelMismatch(String),
}

/// Subtracts, per channel, the mean of the 2 s pre-stimulus interval.
pub fn baseline_correct(
    trial_signal: &[Vec<f64>],
    pre_stimulus: &[Vec<f64>],
    fs: f64,
) -> Result<Vec<Vec<f64>>, DspError> {
    let expected = (BASELINE_SECONDS * fs).round() as usize;
    if trial_signal.len() != pre_stimulus.len() {
        return Err(DspError::ChannelMismatch(format!(
            "{} signal channels vs {} baseline channels",
            trial_signal.len(),
            pre_stimulus.len()
        )));
    }
    trial_signal
        .iter()
        .zip(pre_stimulus)
        .map(|(x, base)| {
            if base.len() != expected {
                return Err(DspError::BaselineLengthMismatch { expected, got: base.len() });
            }
            let m = base.iter().sum::<f64>() / base.len() as f64;
            Ok(x.iter().map(|v| v - m).collect())
        })
        .collect()
}

pub const TIME_STATS: [&str; 4] = ["mean", "sd", "min", "max"];

/// Per-channel features: five band powers (µV²) and four time statistics (µV).
#[derive(Debug, Clone, PartialEq)]
pub struct EegFeatures {
    pub band_power: Vec<[f64; 5]>,
    pub time_stats: Vec<[f64; 4]>,
}

impl EegFeatures {
    /// Flattened in the order of [`eeg_feature_names`].
    pub fn values(&self) -> Vec<f64> {
        self.band_power
            .iter()
            .zip(&self.time_stats)
            .flat_map(|(bp, ts)| bp.iter().chain(ts.iter()).copied())
            .collect()
    }
}

pub fn eeg_feature_names(layout: &ChannelLayout) -> Vec<String> {
    let mut names = Vec::with_capacity(layout.names().len() * 9);
    for ch in layout.names() {
        for band in canonical_bands() {
            names.push(format!("eeg_{ch}_{}_power", band.name));
        }
        for stat in TIME_STATS {
            names.push(format!("eeg_{ch}_{stat}"));
        }
    }
    names
}

fn ms_to_index(t_ms: f64, fs: f64) -> i64 {
    (t_ms * fs / 1000.0).round() as i64
}

/// Features for one trial. The recording's first sample is at t = 0 ms in the
/// trial's time base. Returns `Ok(None)` when the stimulus window holds fewer
/// than 256 samples (feature-missing).
pub fn extract_eeg_features(
    trial: &Trial,
    rec: &EegRecording,
    filter: &FilterSpec,
) -> Result<Option<EegFeatures>, DspError> {
    if rec.n_channels() != N_CHANNELS {
        return Err(DspError::ChannelMismatch(format!(
            "trial {}: {} channels",
            trial.trial_id,
            rec.n_channels()
        )));
    }
    let fs = f64::from(rec.sample_rate_hz);
    let n_base = (BASELINE_SECONDS * fs).round() as i64;
    let onset = ms_to_index(trial.stimulus_onset_ms, fs);
    let end = ms_to_index(trial.response_ms, fs);
    let start = onset - n_base;
    if start < 0 || end > rec.n_samples() as i64 || end <= onset {
        return Err(DspError::WindowOutOfBounds {
            trial_id: trial.trial_id.clone(),
            start,
            end,
            n_samples: rec.n_samples(),
        });
    }
    let (start, onset, end) = (start as usize, onset as usize, end as usize);
    if end - onset < WELCH_WINDOW {
        return Ok(None);
    }

    let sos = design_bandpass(filter, fs)?;
    let mut base = Vec::with_capacity(N_CHANNELS);
    let mut stim = Vec::with_capacity(N_CHANNELS);
    for ch in &rec.data {
        let epoch: Vec<f64> = ch[start..end].iter().map(|&v| f64::from(v)).collect();
        let filtered = filtfilt(&sos, &epoch)?;
        let split = onset - start;
        base.push(filtered[..split].to_vec());
        stim.push(filtered[split..].to_vec());
    }
    let corrected = baseline_correct(&stim, &base, fs)?;

    let psd = welch_psd_channels(&corrected, fs)?;
    let mut powers = vec![[0.0; 5]; N_CHANNELS];
    for (b, band) in canonical_bands().iter().enumerate() {
        for (ch, p) in band_power(&psd, band)?.into_iter().enumerate() {
            powers[ch][b] = p;
        }
    }
    let time_stats = corrected
        .iter()
        .map(|x| {
            let s = summary(x);
            [s.mean, s.sd.unwrap_or(0.0), s.min, s.max]
        })
        .collect();
    Ok(Some(EegFeatures { band_power: powers, time_stats }))
}
