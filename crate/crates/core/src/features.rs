//! Per-trial feature matrix: extraction over a manifest and the CSV format.
//!
//! CSV layout: metadata columns (`trial_id, meme_id, subject_id, experiment,
//! task1, task2, task3`) followed by the 144 EEG and 25 behavioral feature
//! columns. Missing values are empty cells; `task3` is `;`-joined.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{behavioral_feature_names, et_features, hr_features, reaction_time, BehaviorError, BehavioralFeatures, HrUnit};
use crate::eeg::{eeg_feature_names, extract_eeg_features, DspError, FilterSpec};
use crate::io::{IoError, Manifest, ManifestEntry};
use crate::types::{Category, ChannelLayout, Experiment, SexismLabels, Task1, Task2, ValidationError};

pub const META_COLUMNS: [&str; 7] = ["trial_id", "meme_id", "subject_id", "experiment", "task1", "task2", "task3"];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("trial {trial_id}: {source}")]
    Dsp { trial_id: String, source: DspError },
    #[error("trial {trial_id}: {source}")]
    Behavior { trial_id: String, source: BehaviorError },
    #[error("{path}:{line}: {message}")]
    Csv { path: String, line: usize, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub filter: FilterSpec,
    pub hr_unit: HrUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub trial_id: String,
    pub meme_id: String,
    pub subject_id: String,
    pub experiment: Experiment,
    pub labels: SexismLabels,
}

/// Feature matrix; `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub meta: Vec<RowMeta>,
    pub values: Vec<Vec<f64>>,
}

pub fn feature_names(layout: &ChannelLayout) -> Vec<String> {
    let mut names = eeg_feature_names(layout);
    names.extend(behavioral_feature_names());
    names
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Feature row for one manifest entry.
pub fn extract_row(manifest: &Manifest, entry: &ManifestEntry, config: &ExtractConfig) -> Result<Vec<f64>, FeatureError> {
    let trial = &entry.trial;
    let dsp = |source| FeatureError::Dsp { trial_id: trial.trial_id.clone(), source };
    let beh = |source| FeatureError::Behavior { trial_id: trial.trial_id.clone(), source };
    let window = trial.window_ms();

    let mut row = match manifest.eeg(entry)? {
        Some(rec) => match extract_eeg_features(trial, &rec, &config.filter).map_err(dsp)? {
            Some(f) => f.values(),
            None => vec![f64::NAN; 144],
        },
        None => vec![f64::NAN; 144],
    };
    let et = manifest.et(entry)?.map(|ev| et_features(&ev, window)).transpose().map_err(beh)?;
    let hr = match manifest.hr(entry)? {
        Some(beats) => match hr_features(&beats, window, config.hr_unit) {
            Ok(h) => Some(h),
            Err(BehaviorError::InsufficientBeats) => None,
            Err(e) => return Err(beh(e)),
        },
        None => None,
    };
    let rt_s = Some(reaction_time(trial).map_err(beh)?);
    row.extend(BehavioralFeatures { et, hr, rt_s }.values().into_iter().map(opt));
    Ok(row)
}

/// Extracts every manifest entry in parallel; rows keep manifest order.
pub fn extract_features(manifest: &Manifest, config: &ExtractConfig) -> Result<FeatureTable, FeatureError> {
    let values = manifest
        .entries
        .par_iter()
        .map(|e| extract_row(manifest, e, config))
        .collect::<Result<Vec<_>, _>>()?;
    let meta = manifest
        .entries
        .iter()
        .map(|e| RowMeta {
            trial_id: e.trial.trial_id.clone(),
            meme_id: e.trial.meme_id.clone(),
            subject_id: e.trial.subject_id.clone(),
            experiment: e.trial.experiment,
            labels: e.trial.labels.clone(),
        })
        .collect();
    Ok(FeatureTable { columns: feature_names(&ChannelLayout::standard_16()), meta, values })
}

fn experiment_str(e: Experiment) -> &'static str {
    match e {
        Experiment::EtHr => "ET_HR",
        Experiment::EegHr => "EEG_HR",
    }
}

fn task1_str(t: Task1) -> &'static str {
    match t {
        Task1::Sexist => "sexist",
        Task1::NonSexist => "non_sexist",
        Task1::Tie => "tie",
    }
}

fn format_value(v: f64) -> String {
    if v.is_finite() { format!("{v}") } else { String::new() }
}

impl FeatureTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let file = crate::io::create(path)?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| FeatureError::Csv { path: path.display().to_string(), line: 0, message: e.to_string() };
        let header: Vec<&str> = META_COLUMNS.iter().copied().chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_err)?;
        for (m, row) in self.meta.iter().zip(&self.values) {
            let task3: Vec<&str> = m.labels.task3.iter().map(|c| c.as_str()).collect();
            let mut rec = vec![
                m.trial_id.clone(),
                m.meme_id.clone(),
                m.subject_id.clone(),
                experiment_str(m.experiment).to_string(),
                task1_str(m.labels.task1).to_string(),
                match m.labels.task2 {
                    Some(Task2::Direct) => "direct".into(),
                    Some(Task2::Judgmental) => "judgmental".into(),
                    None => String::new(),
                },
                task3.join(";"),
            ];
            rec.extend(row.iter().map(|&v| format_value(v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| FeatureError::Io(IoError::Io { path: path.to_path_buf(), source: e }))
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable, FeatureError> {
        let p = path.display().to_string();
        let err = |line: usize, message: String| FeatureError::Csv { path: p.clone(), line, message };
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                IoError::MissingFile(path.to_path_buf())
            } else {
                IoError::Io { path: path.to_path_buf(), source: e }
            }
        })?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
        if header.len() < META_COLUMNS.len() || header.iter().zip(META_COLUMNS).any(|(h, m)| h != m) {
            return Err(err(1, format!("header must start with {}", META_COLUMNS.join(","))));
        }
        let columns: Vec<String> = header.iter().skip(META_COLUMNS.len()).map(String::from).collect();
        let mut meta = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| err(line, e.to_string()))?;
            let experiment = match &rec[3] {
                "ET_HR" => Experiment::EtHr,
                "EEG_HR" => Experiment::EegHr,
                other => return Err(err(line, format!("unknown experiment `{other}`"))),
            };
            let task1 = match &rec[4] {
                "sexist" => Task1::Sexist,
                "non_sexist" => Task1::NonSexist,
                "tie" => Task1::Tie,
                other => return Err(err(line, format!("unknown task1 `{other}`"))),
            };
            let task2 = match &rec[5] {
                "" => None,
                "direct" => Some(Task2::Direct),
                "judgmental" => Some(Task2::Judgmental),
                other => return Err(err(line, format!("unknown task2 `{other}`"))),
            };
            let task3 = rec[6]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<Category>())
                .collect::<Result<Vec<_>, _>>()?;
            let row = rec
                .iter()
                .skip(META_COLUMNS.len())
                .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>().map_err(|e| err(line, format!("`{c}`: {e}"))) })
                .collect::<Result<Vec<f64>, _>>()?;
            meta.push(RowMeta {
                trial_id: rec[0].to_string(),
                meme_id: rec[1].to_string(),
                subject_id: rec[2].to_string(),
                experiment,
                labels: SexismLabels { task1, task2, task3 },
            });
            values.push(row);
        }
        Ok(FeatureTable { columns, meta, values })
    }
}
