//! Shared domain vocabulary: bands, channel layout, labels, trials and recordings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("trial {trial_id}: {reason}")]
    Trial { trial_id: String, reason: String },
    #[error("recording: {0}")]
    Recording(String),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// The five canonical EEG bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl BandName {
    pub const ALL: [BandName; 5] = [
        BandName::Delta,
        BandName::Theta,
        BandName::Alpha,
        BandName::Beta,
        BandName::Gamma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn band(self) -> FrequencyBand {
        canonical_bands()[self.index()]
    }
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandName {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BandName::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ValidationError::Unknown {
                kind: "band",
                value: s.to_string(),
            })
    }
}

/// A frequency band `[lo_hz, hi_hz)`. Gamma is closed at its upper edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBand {
    pub name: BandName,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl FrequencyBand {
    pub fn contains(&self, f: f64) -> bool {
        if self.name == BandName::Gamma {
            f >= self.lo_hz && f <= self.hi_hz
        } else {
            f >= self.lo_hz && f < self.hi_hz
        }
    }
}

const BANDS: [FrequencyBand; 5] = [
    FrequencyBand { name: BandName::Delta, lo_hz: 0.5, hi_hz: 4.0 },
    FrequencyBand { name: BandName::Theta, lo_hz: 4.0, hi_hz: 8.0 },
    FrequencyBand { name: BandName::Alpha, lo_hz: 8.0, hi_hz: 13.0 },
    FrequencyBand { name: BandName::Beta, lo_hz: 13.0, hi_hz: 30.0 },
    FrequencyBand { name: BandName::Gamma, lo_hz: 30.0, hi_hz: 40.0 },
];

/// Delta through Gamma, contiguous over 0.5-40 Hz.
pub fn canonical_bands() -> [FrequencyBand; 5] {
    BANDS
}

/// Returns the band containing `f`, if any.
pub fn band_for_frequency(f: f64) -> Option<FrequencyBand> {
    BANDS.iter().copied().find(|b| b.contains(f))
}

/// 16-channel 10-20 montage with planar head coordinates (nose up). The rim
/// electrodes sit at radius 0.9 of the unit head circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    names: Vec<String>,
    positions: Vec<(f64, f64)>,
}

pub const N_CHANNELS: usize = 16;

const STANDARD_16: [(&str, f64, f64); N_CHANNELS] = [
    ("Fp1", -0.309, 0.951),
    ("Fp2", 0.309, 0.951),
    ("F7", -0.809, 0.588),
    ("F3", -0.405, 0.500),
    ("F4", 0.405, 0.500),
    ("F8", 0.809, 0.588),
    ("T7", -1.0, 0.0),
    ("C3", -0.5, 0.0),
    ("C4", 0.5, 0.0),
    ("T8", 1.0, 0.0),
    ("P7", -0.809, -0.588),
    ("P3", -0.405, -0.500),
    ("P4", 0.405, -0.500),
    ("P8", 0.809, -0.588),
    ("O1", -0.309, -0.951),
    ("O2", 0.309, -0.951),
];

impl ChannelLayout {
    pub fn standard_16() -> Self {
        ChannelLayout {
            names: STANDARD_16.iter().map(|(n, _, _)| n.to_string()).collect(),
            positions: STANDARD_16.iter().map(|&(_, x, y)| (0.9 * x, 0.9 * y)).collect(),
        }
    }

    pub fn new(names: Vec<String>, positions: Vec<(f64, f64)>) -> Result<Self, ValidationError> {
        if names.len() != N_CHANNELS || positions.len() != N_CHANNELS {
            return Err(ValidationError::Recording(format!(
                "layout needs {N_CHANNELS} channels, got {} names / {} positions",
                names.len(),
                positions.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(ValidationError::Recording(format!("duplicate channel {n}")));
            }
        }
        if let Some((x, y)) = positions.iter().find(|(x, y)| x * x + y * y > 1.0 + 1e-9) {
            return Err(ValidationError::Recording(format!(
                "position ({x}, {y}) outside the head circle"
            )));
        }
        Ok(ChannelLayout { names, positions })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::standard_16()
    }
}

/// Majority-vote binary label. `Tie` trials are kept for feature extraction
/// but excluded from supervised splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task1 {
    Sexist,
    NonSexist,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task2 {
    Direct,
    Judgmental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    IdeologicalInequality,
    StereotypingDominance,
    Objectification,
    SexualViolence,
    MisogynyNonSexualViolence,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::IdeologicalInequality,
        Category::StereotypingDominance,
        Category::Objectification,
        Category::SexualViolence,
        Category::MisogynyNonSexualViolence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::IdeologicalInequality => "ideological_inequality",
            Category::StereotypingDominance => "stereotyping_dominance",
            Category::Objectification => "objectification",
            Category::SexualViolence => "sexual_violence",
            Category::MisogynyNonSexualViolence => "misogyny_non_sexual_violence",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Category {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ValidationError::Unknown {
                kind: "category",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SexismLabels {
    pub task1: Task1,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task2: Option<Task2>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task3: Vec<Category>,
}

impl SexismLabels {
    pub fn non_sexist() -> Self {
        SexismLabels { task1: Task1::NonSexist, task2: None, task3: Vec::new() }
    }

    pub fn sexist(task2: Option<Task2>, task3: Vec<Category>) -> Self {
        SexismLabels { task1: Task1::Sexist, task2, task3 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.task1 != Task1::Sexist && (self.task2.is_some() || !self.task3.is_empty()) {
            return Err("task2/task3 set on a trial that is not labeled sexist".into());
        }
        let mut seen = [false; 5];
        for c in &self.task3 {
            if std::mem::replace(&mut seen[c.index()], true) {
                return Err(format!("duplicate task3 category {}", c.as_str()));
            }
        }
        Ok(())
    }

    /// Three-level sexism grouping: NonSexist / Direct / Judgmental.
    pub fn level(&self) -> Option<SexismLevel> {
        match (self.task1, self.task2) {
            (Task1::NonSexist, _) => Some(SexismLevel::NonSexist),
            (Task1::Sexist, Some(Task2::Direct)) => Some(SexismLevel::Direct),
            (Task1::Sexist, Some(Task2::Judgmental)) => Some(SexismLevel::Judgmental),
            _ => None,
        }
    }

    pub fn has_category(&self, c: Category) -> bool {
        self.task3.contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SexismLevel {
    NonSexist,
    Direct,
    Judgmental,
}

impl SexismLevel {
    pub const ALL: [SexismLevel; 3] =
        [SexismLevel::NonSexist, SexismLevel::Direct, SexismLevel::Judgmental];

    pub fn as_str(self) -> &'static str {
        match self {
            SexismLevel::NonSexist => "non_sexist",
            SexismLevel::Direct => "direct",
            SexismLevel::Judgmental => "judgmental",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    /// Experiment 1: eye tracking + heart rate.
    #[serde(rename = "ET_HR")]
    EtHr,
    /// Experiment 2: EEG + heart rate.
    #[serde(rename = "EEG_HR")]
    EegHr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub meme_id: String,
    pub subject_id: String,
    pub session_id: String,
    pub experiment: Experiment,
    pub stimulus_onset_ms: f64,
    pub response_ms: f64,
    pub labels: SexismLabels,
}

impl Trial {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let fail = |reason: String| ValidationError::Trial {
            trial_id: self.trial_id.clone(),
            reason,
        };
        if self.trial_id.is_empty() || self.meme_id.is_empty() || self.subject_id.is_empty() {
            return Err(fail("empty identifier".into()));
        }
        if !self.stimulus_onset_ms.is_finite() || !self.response_ms.is_finite() {
            return Err(fail("non-finite timestamps".into()));
        }
        if self.response_ms <= self.stimulus_onset_ms {
            return Err(fail(format!(
                "response_ms ({}) must exceed stimulus_onset_ms ({})",
                self.response_ms, self.stimulus_onset_ms
            )));
        }
        self.labels.validate().map_err(fail)
    }

    pub fn window_ms(&self) -> (f64, f64) {
        (self.stimulus_onset_ms, self.response_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtEventKind {
    Fixation,
    Blink,
    Pupil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtEvent {
    #[serde(rename = "t")]
    pub kind: EtEventKind,
    pub start_ms: f64,
    pub end_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pupil_left_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pupil_right_mm: Option<f64>,
}

impl EtEvent {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beat {
    pub t_ms: f64,
    pub ibi_ms: f64,
}

/// Uniformly sampled multichannel EEG, channel-major, in µV.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub sample_rate_hz: f32,
    pub data: Vec<Vec<f32>>,
}

impl EegRecording {
    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.n_channels() != N_CHANNELS {
            return Err(ValidationError::Recording(format!(
                "expected {N_CHANNELS} channels, got {}",
                self.n_channels()
            )));
        }
        if self.data.iter().any(|c| c.len() != self.n_samples()) {
            return Err(ValidationError::Recording("ragged channel lengths".into()));
        }
        if self.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ValidationError::Recording("non-finite sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalRecording {
    Eeg(EegRecording),
    EtEvents(Vec<EtEvent>),
    HeartIbi(Vec<Beat>),
}

impl SignalRecording {
    pub fn validate(&self) -> Result<(), ValidationError> {
        match self {
            SignalRecording::Eeg(r) => r.validate(),
            SignalRecording::EtEvents(events) => {
                for e in events {
                    if !(e.start_ms.is_finite() && e.end_ms.is_finite()) || e.start_ms > e.end_ms {
                        return Err(ValidationError::Recording(format!(
                            "ET event with start {} > end {}",
                            e.start_ms, e.end_ms
                        )));
                    }
                }
                Ok(())
            }
            SignalRecording::HeartIbi(beats) => {
                if let Some(b) = beats.iter().find(|b| !(b.ibi_ms > 0.0)) {
                    return Err(ValidationError::Recording(format!(
                        "non-positive IBI {} at t = {}",
                        b.ibi_ms, b.t_ms
                    )));
                }
                if beats.windows(2).any(|w| w[1].t_ms <= w[0].t_ms) {
                    return Err(ValidationError::Recording("beat timestamps not increasing".into()));
                }
                Ok(())
            }
        }
    }
}
