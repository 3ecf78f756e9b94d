//! Label groupings of a feature table for ANOVA and channel-band contrasts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureTable;
use crate::stats::{channel_band_contrast, one_way_anova_named, AnovaResult, ChannelContrast, StatsError};
use crate::types::{BandName, Category, ChannelLayout, SexismLabels, SexismLevel, Task1, Task2, ValidationError};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("unknown feature column `{0}`")]
    UnknownColumn(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How trials are split into groups.
///
/// * `Task1`: non-sexist vs sexist (ties excluded).
/// * `Task2`: non-sexist / direct / judgmental for ANOVA; the two-group
///   contrast compares judgmental (A) with direct (B).
/// * `Category(c)`: trials without `c` (A) vs trials with `c` (B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    Task1,
    Task2,
    Category(Category),
}

impl FromStr for Grouping {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task1" => Ok(Grouping::Task1),
            "task2" => Ok(Grouping::Task2),
            other => other
                .strip_prefix("category:")
                .unwrap_or(other)
                .parse()
                .map(Grouping::Category)
                .map_err(|_| ValidationError::Unknown { kind: "grouping", value: s.to_string() }),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grouping::Task1 => f.write_str("task1"),
            Grouping::Task2 => f.write_str("task2"),
            Grouping::Category(c) => write!(f, "category:{}", c.as_str()),
        }
    }
}

impl Grouping {
    /// Group names for ANOVA, in order.
    pub fn anova_groups(&self) -> Vec<String> {
        match self {
            Grouping::Task1 => vec!["non_sexist".into(), "sexist".into()],
            Grouping::Task2 => SexismLevel::ALL.iter().map(|l| l.as_str().to_string()).collect(),
            Grouping::Category(c) => vec![format!("not_{}", c.as_str()), c.as_str().to_string()],
        }
    }

    pub fn anova_group_of(&self, l: &SexismLabels) -> Option<usize> {
        match self {
            Grouping::Task1 => match l.task1 {
                Task1::NonSexist => Some(0),
                Task1::Sexist => Some(1),
                Task1::Tie => None,
            },
            Grouping::Task2 => l.level().map(|lv| lv as usize),
            Grouping::Category(c) => (l.task1 != Task1::Tie).then(|| usize::from(l.has_category(*c))),
        }
    }

    /// Contrast labels (A, B); the difference is B - A.
    pub fn contrast_labels(&self) -> (String, String) {
        match self {
            Grouping::Task1 => ("non_sexist".into(), "sexist".into()),
            Grouping::Task2 => ("judgmental".into(), "direct".into()),
            Grouping::Category(c) => (format!("not_{}", c.as_str()), c.as_str().to_string()),
        }
    }

    /// 0 for side A, 1 for side B, `None` if the trial is in neither.
    pub fn contrast_side_of(&self, l: &SexismLabels) -> Option<usize> {
        match self {
            Grouping::Task2 => match (l.task1, l.task2) {
                (Task1::Sexist, Some(Task2::Judgmental)) => Some(0),
                (Task1::Sexist, Some(Task2::Direct)) => Some(1),
                _ => None,
            },
            _ => self.anova_group_of(l),
        }
    }
}

/// One-way ANOVA of a feature column across the grouping; missing values are skipped.
pub fn anova_by(table: &FeatureTable, by: Grouping, metric: &str) -> Result<AnovaResult, AnalysisError> {
    let j = table.column_index(metric).ok_or_else(|| AnalysisError::UnknownColumn(metric.to_string()))?;
    let names = by.anova_groups();
    let mut groups = vec![Vec::new(); names.len()];
    for (m, row) in table.meta.iter().zip(&table.values) {
        if let Some(g) = by.anova_group_of(&m.labels) {
            if row[j].is_finite() {
                groups[g].push(row[j]);
            }
        }
    }
    Ok(one_way_anova_named(metric, &names, &groups)?)
}

/// Column indices of the 80 band powers, channel-major.
pub fn band_power_columns(table: &FeatureTable, layout: &ChannelLayout) -> Result<Vec<usize>, AnalysisError> {
    let mut out = Vec::with_capacity(80);
    for ch in layout.names() {
        for band in BandName::ALL {
            let name = format!("eeg_{ch}_{}_power", band.as_str());
            out.push(table.column_index(&name).ok_or(AnalysisError::UnknownColumn(name))?);
        }
    }
    Ok(out)
}

/// Per-channel band-power contrast between the two sides of the grouping.
/// Trials lacking any band power are skipped.
pub fn contrast_by(
    table: &FeatureTable,
    by: Grouping,
    layout: &ChannelLayout,
    fdr: bool,
) -> Result<Vec<ChannelContrast>, AnalysisError> {
    let cols = band_power_columns(table, layout)?;
    let mut sides: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for (m, row) in table.meta.iter().zip(&table.values) {
        let Some(side) = by.contrast_side_of(&m.labels) else { continue };
        let v: Vec<f64> = cols.iter().map(|&j| row[j]).collect();
        if v.iter().all(|x| x.is_finite()) {
            sides[side].push(v);
        }
    }
    Ok(channel_band_contrast(&sides[0], &sides[1], layout, fdr)?)
}
