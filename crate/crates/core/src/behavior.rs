//! Eye-tracking, heart-rate and reaction-time features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{summarize, Summary};
use crate::types::{Beat, EtEvent, EtEventKind, Trial};

#[derive(Debug, Error, PartialEq)]
pub enum BehaviorError {
    #[error("trial {trial_id}: non-positive reaction time")]
    NonPositiveRt { trial_id: String },
    #[error("ET events not sorted by start time at index {index}")]
    UnsortedEvents { index: usize },
    #[error("no heart beats inside the window")]
    InsufficientBeats,
}

/// Elapsed seconds between stimulus onset and response.
pub fn reaction_time(trial: &Trial) -> Result<f64, BehaviorError> {
    let rt = (trial.response_ms - trial.stimulus_onset_ms) / 1000.0;
    if rt > 0.0 {
        Ok(rt)
    } else {
        Err(BehaviorError::NonPositiveRt { trial_id: trial.trial_id.clone() })
    }
}

/// Mean, sd, min, max and count of one event family. Statistics other than the
/// count are missing for an empty family; sd is missing below two events.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl FamilyStats {
    fn of(values: &[f64]) -> Self {
        match summarize(values) {
            None => FamilyStats::default(),
            Some(Summary { count, mean, sd, min, max }) => FamilyStats {
                count,
                mean: Some(mean),
                sd,
                min: Some(min),
                max: Some(max),
            },
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.mean, self.sd, self.min, self.max, Some(self.count as f64)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EtFeatures {
    /// Durations in ms.
    pub fixation: FamilyStats,
    /// Durations in ms.
    pub blink: FamilyStats,
    /// Diameters in mm.
    pub pupil_left: FamilyStats,
    pub pupil_right: FamilyStats,
}

pub const ET_FAMILIES: [&str; 4] = ["fixation", "blink", "pupil_left", "pupil_right"];
pub const ET_STATS: [&str; 5] = ["mean", "sd", "min", "max", "count"];

/// ET summaries over events overlapping `[onset, response]`; durations are
/// clipped to the window.
pub fn et_features(events: &[EtEvent], window: (f64, f64)) -> Result<EtFeatures, BehaviorError> {
    if let Some(i) = events.windows(2).position(|w| w[1].start_ms < w[0].start_ms) {
        return Err(BehaviorError::UnsortedEvents { index: i + 1 });
    }
    let (lo, hi) = window;
    let mut fix = Vec::new();
    let mut blink = Vec::new();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for e in events {
        match e.kind {
            EtEventKind::Fixation | EtEventKind::Blink => {
                if e.start_ms < hi && e.end_ms > lo {
                    let d = e.end_ms.min(hi) - e.start_ms.max(lo);
                    if e.kind == EtEventKind::Fixation {
                        fix.push(d);
                    } else {
                        blink.push(d);
                    }
                }
            }
            EtEventKind::Pupil => {
                if e.start_ms <= hi && e.end_ms >= lo {
                    left.extend(e.pupil_left_mm);
                    right.extend(e.pupil_right_mm);
                }
            }
        }
    }
    Ok(EtFeatures {
        fixation: FamilyStats::of(&fix),
        blink: FamilyStats::of(&blink),
        pupil_left: FamilyStats::of(&left),
        pupil_right: FamilyStats::of(&right),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HrUnit {
    /// Instantaneous rate, 60000 / ibi_ms.
    #[default]
    Bpm,
    IbiMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrFeatures {
    pub mean: f64,
    pub sd: Option<f64>,
    pub min: f64,
    pub max: f64,
}

pub const HR_STATS: [&str; 4] = ["mean", "sd", "min", "max"];

/// Heart-rate summary over beats whose timestamp lies in `[onset, response]`.
pub fn hr_features(beats: &[Beat], window: (f64, f64), unit: HrUnit) -> Result<HrFeatures, BehaviorError> {
    let (lo, hi) = window;
    let series: Vec<f64> = beats
        .iter()
        .filter(|b| b.t_ms >= lo && b.t_ms <= hi)
        .map(|b| match unit {
            HrUnit::Bpm => 60_000.0 / b.ibi_ms,
            HrUnit::IbiMs => b.ibi_ms,
        })
        .collect();
    let s = summarize(&series).ok_or(BehaviorError::InsufficientBeats)?;
    Ok(HrFeatures { mean: s.mean, sd: s.sd, min: s.min, max: s.max })
}

/// Behavioral block of the feature row; `None` parts are missing streams.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BehavioralFeatures {
    pub et: Option<EtFeatures>,
    pub hr: Option<HrFeatures>,
    pub rt_s: Option<f64>,
}

pub fn behavioral_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(25);
    for fam in ET_FAMILIES {
        for stat in ET_STATS {
            names.push(format!("et_{fam}_{stat}"));
        }
    }
    for stat in HR_STATS {
        names.push(format!("hr_{stat}"));
    }
    names.push("rt_s".into());
    names
}

impl BehavioralFeatures {
    /// Values in the order of [`behavioral_feature_names`].
    pub fn values(&self) -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(25);
        match &self.et {
            Some(et) => {
                for fam in [et.fixation, et.blink, et.pupil_left, et.pupil_right] {
                    out.extend(fam.values());
                }
            }
            None => out.extend([None; 20]),
        }
        match &self.hr {
            Some(hr) => out.extend([Some(hr.mean), hr.sd, Some(hr.min), Some(hr.max)]),
            None => out.extend([None; 4]),
        }
        out.push(self.rt_s);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Experiment, SexismLabels};
    use proptest::prelude::*;

    fn fix(start: f64, dur: f64) -> EtEvent {
        EtEvent { kind: EtEventKind::Fixation, start_ms: start, end_ms: start + dur, pupil_left_mm: None, pupil_right_mm: None }
    }

    fn trial(onset: f64, response: f64) -> Trial {
        Trial {
            trial_id: "t".into(),
            meme_id: "m".into(),
            subject_id: "s".into(),
            session_id: "1".into(),
            experiment: Experiment::EtHr,
            stimulus_onset_ms: onset,
            response_ms: response,
            labels: SexismLabels::non_sexist(),
        }
    }

    #[test]
    fn reaction_time_examples() {
        assert!((reaction_time(&trial(1000.0, 14680.0)).unwrap() - 13.68).abs() < 1e-12);
        assert_eq!(reaction_time(&trial(0.0, 500.0)).unwrap(), 0.5);
        assert!(matches!(reaction_time(&trial(10.0, 10.0)), Err(BehaviorError::NonPositiveRt { .. })));
    }

    #[test]
    fn fixation_hand_arithmetic() {
        let ev = vec![fix(100.0, 200.0), fix(400.0, 300.0), fix(800.0, 400.0)];
        let f = et_features(&ev, (0.0, 2000.0)).unwrap();
        assert_eq!(f.fixation.count, 3);
        assert_eq!(f.fixation.mean, Some(300.0));
        assert_eq!(f.fixation.sd, Some(100.0));
        assert_eq!(f.fixation.min, Some(200.0));
        assert_eq!(f.fixation.max, Some(400.0));
    }

    #[test]
    fn empty_family_is_missing() {
        let f = et_features(&[fix(0.0, 100.0)], (0.0, 1000.0)).unwrap();
        assert_eq!(f.blink.count, 0);
        assert_eq!((f.blink.mean, f.blink.sd, f.blink.min, f.blink.max), (None, None, None, None));
    }

    #[test]
    fn partial_overlap_is_clipped() {
        let f = et_features(&[fix(-50.0, 150.0), fix(950.0, 100.0)], (0.0, 1000.0)).unwrap();
        assert_eq!(f.fixation.count, 2);
        assert_eq!(f.fixation.min, Some(50.0));
        assert_eq!(f.fixation.max, Some(100.0));
    }

    #[test]
    fn unsorted_events_rejected() {
        let ev = vec![fix(500.0, 10.0), fix(100.0, 10.0)];
        assert_eq!(et_features(&ev, (0.0, 1000.0)), Err(BehaviorError::UnsortedEvents { index: 1 }));
    }

    #[test]
    fn pupil_stats_per_eye() {
        let p = |t: f64, l: f64, r: f64| EtEvent {
            kind: EtEventKind::Pupil,
            start_ms: t,
            end_ms: t,
            pupil_left_mm: Some(l),
            pupil_right_mm: Some(r),
        };
        let f = et_features(&[p(10.0, 3.0, 4.0), p(20.0, 5.0, 4.5), p(5000.0, 9.0, 9.0)], (0.0, 100.0)).unwrap();
        assert_eq!(f.pupil_left.mean, Some(4.0));
        assert_eq!(f.pupil_right.mean, Some(4.25));
        assert_eq!(f.pupil_right.count, 2);
    }

    #[test]
    fn hr_examples() {
        let beats = |ibis: &[f64]| -> Vec<Beat> {
            let mut t = 0.0;
            ibis.iter().map(|&ibi| { t += ibi; Beat { t_ms: t, ibi_ms: ibi } }).collect()
        };
        let h = hr_features(&beats(&[1000.0; 5]), (0.0, 10_000.0), HrUnit::Bpm).unwrap();
        assert_eq!((h.mean, h.sd), (60.0, Some(0.0)));
        let h = hr_features(&beats(&[1000.0, 800.0]), (0.0, 10_000.0), HrUnit::Bpm).unwrap();
        assert_eq!((h.mean, h.min, h.max), (67.5, 60.0, 75.0));
        let h = hr_features(&beats(&[1000.0, 800.0]), (0.0, 1500.0), HrUnit::Bpm).unwrap();
        assert_eq!((h.mean, h.sd), (60.0, None));
        assert_eq!(hr_features(&beats(&[1000.0]), (0.0, 500.0), HrUnit::Bpm), Err(BehaviorError::InsufficientBeats));
        let h = hr_features(&beats(&[1000.0, 800.0]), (0.0, 10_000.0), HrUnit::IbiMs).unwrap();
        assert_eq!(h.mean, 900.0);
    }

    #[test]
    fn names_and_values_align() {
        let names = behavioral_feature_names();
        assert_eq!(names.len(), 25);
        assert_eq!(BehavioralFeatures::default().values().len(), 25);
        assert_eq!(names[4], "et_fixation_count");
        assert_eq!(names[24], "rt_s");
    }

    proptest! {
        #[test]
        fn time_shift_invariance(durs in prop::collection::vec(1u32..500, 1..20), shift in -100_000i32..100_000) {
            let mut t = 0.0;
            let ev: Vec<EtEvent> = durs.iter().map(|&d| { let e = fix(t, f64::from(d)); t += f64::from(d) + 10.0; e }).collect();
            let w = (100.0, t - 50.0);
            let s = f64::from(shift);
            let moved: Vec<EtEvent> = ev.iter().map(|e| EtEvent { start_ms: e.start_ms + s, end_ms: e.end_ms + s, ..e.clone() }).collect();
            prop_assert_eq!(et_features(&ev, w).unwrap(), et_features(&moved, (w.0 + s, w.1 + s)).unwrap());
        }

        #[test]
        fn adding_a_fixation_increments_count(durs in prop::collection::vec(1u32..500, 0..20), extra in 1u32..800) {
            let mut t = 0.0;
            let mut ev: Vec<EtEvent> = durs.iter().map(|&d| { let e = fix(t, f64::from(d)); t += f64::from(d); e }).collect();
            let w = (0.0, t + 10_000.0);
            let before = et_features(&ev, w).unwrap();
            ev.push(fix(t + 1.0, f64::from(extra)));
            let after = et_features(&ev, w).unwrap();
            prop_assert_eq!(after.fixation.count, before.fixation.count + 1);
            prop_assert!(after.fixation.max.unwrap() >= before.fixation.max.unwrap_or(f64::NEG_INFINITY));
        }
    }
}
