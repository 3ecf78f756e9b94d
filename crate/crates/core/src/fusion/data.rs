//! Per-meme training examples and padded batches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FusionError, Task};
use crate::autodiff::Tensor;
use crate::features::FeatureTable;
use crate::io::Embedding;
use crate::types::{Experiment, SexismLabels};

/// Columns feeding the EEG branch.
pub fn is_eeg_column(name: &str) -> bool {
    name.starts_with("eeg_")
}

/// Columns feeding the eye-tracking / heart-rate branch.
pub fn is_ethr_column(name: &str) -> bool {
    name.starts_with("et_") || name.starts_with("hr_") || name == "rt_s"
}

/// One meme: text embedding plus raw physiological rows (NaN = missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeExample {
    pub meme_id: String,
    pub cls: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
    pub eeg: Vec<Vec<f64>>,
    pub ethr: Vec<Vec<f64>>,
    pub labels: SexismLabels,
}

/// Groups a feature table by meme. EEG rows come from EEG_HR trials and
/// ET/HR rows from ET_HR trials; rows whose branch values are all missing are
/// left out. Memes are returned sorted by id.
pub fn build_examples(table: &FeatureTable, embeddings: &BTreeMap<String, Embedding>) -> Result<Vec<MemeExample>, FusionError> {
    let eeg_cols: Vec<usize> = (0..table.columns.len()).filter(|&j| is_eeg_column(&table.columns[j])).collect();
    let ethr_cols: Vec<usize> = (0..table.columns.len()).filter(|&j| is_ethr_column(&table.columns[j])).collect();
    let mut by_meme: BTreeMap<&str, MemeExample> = BTreeMap::new();
    for (m, row) in table.meta.iter().zip(&table.values) {
        let ex = match by_meme.get_mut(m.meme_id.as_str()) {
            Some(ex) => ex,
            None => {
                let e = embeddings.get(&m.meme_id).ok_or_else(|| FusionError::MissingEmbedding(m.meme_id.clone()))?;
                let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
                by_meme.entry(&m.meme_id).or_insert(MemeExample {
                    meme_id: m.meme_id.clone(),
                    cls: widen(&e.cls),
                    tokens: e.tokens.iter().map(|t| widen(t)).collect(),
                    eeg: Vec::new(),
                    ethr: Vec::new(),
                    labels: m.labels.clone(),
                })
            }
        };
        if ex.labels != m.labels {
            return Err(FusionError::InconsistentLabels(m.meme_id.clone()));
        }
        let (cols, dest) = match m.experiment {
            Experiment::EegHr => (&eeg_cols, &mut ex.eeg),
            Experiment::EtHr => (&ethr_cols, &mut ex.ethr),
        };
        let v: Vec<f64> = cols.iter().map(|&j| row[j]).collect();
        if v.iter().any(|x| x.is_finite()) {
            dest.push(v);
        }
    }
    Ok(by_meme.into_values().collect())
}

/// Per-feature mean and standard deviation from training rows; applying it
/// standardizes and replaces missing values with 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, width: usize) -> Standardizer {
        let mut sum = vec![0.0; width];
        let mut sum2 = vec![0.0; width];
        let mut n = vec![0usize; width];
        let rows: Vec<&Vec<f64>> = rows.collect();
        for r in &rows {
            for (j, &v) in r.iter().enumerate() {
                if v.is_finite() {
                    sum[j] += v;
                    n[j] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..width).map(|j| if n[j] > 0 { sum[j] / n[j] as f64 } else { 0.0 }).collect();
        for r in &rows {
            for (j, &v) in r.iter().enumerate() {
                if v.is_finite() {
                    sum2[j] += (v - mean[j]).powi(2);
                }
            }
        }
        let sd = (0..width)
            .map(|j| {
                let s = if n[j] > 1 { (sum2[j] / (n[j] - 1) as f64).sqrt() } else { 0.0 };
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Standardizer { mean, sd }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.sd)).map(|(&v, (m, s))| if v.is_finite() { (v - m) / s } else { 0.0 }).collect()
    }
}

/// Standardizers for both branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub eeg: Standardizer,
    pub ethr: Standardizer,
}

impl InputScaling {
    pub fn fit(examples: &[MemeExample], f_eeg: usize, f_ethr: usize) -> InputScaling {
        InputScaling {
            eeg: Standardizer::fit(examples.iter().flat_map(|e| &e.eeg), f_eeg),
            ethr: Standardizer::fit(examples.iter().flat_map(|e| &e.ethr), f_ethr),
        }
    }

    pub fn identity(f_eeg: usize, f_ethr: usize) -> InputScaling {
        InputScaling {
            eeg: Standardizer { mean: vec![0.0; f_eeg], sd: vec![1.0; f_eeg] },
            ethr: Standardizer { mean: vec![0.0; f_ethr], sd: vec![1.0; f_ethr] },
        }
    }
}

/// Zero-padded batch tensors; masks are `true` at real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBatch {
    pub meme_ids: Vec<String>,
    pub cls: Tensor,
    pub tokens: Tensor,
    pub token_mask: Vec<bool>,
    pub eeg: Tensor,
    pub eeg_mask: Vec<bool>,
    pub ethr: Tensor,
    pub ethr_mask: Vec<bool>,
    /// `[B, K]` targets; empty when the task does not apply.
    pub targets: Vec<f64>,
}

fn pad(seqs: &[&[Vec<f64>]], width: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> (Tensor, Vec<bool>) {
    let b = seqs.len();
    let s = seqs.iter().map(|q| q.len()).max().unwrap_or(0);
    let mut data = vec![0.0; b * s * width];
    let mut mask = vec![false; b * s];
    for (bi, q) in seqs.iter().enumerate() {
        for (si, row) in q.iter().enumerate() {
            data[(bi * s + si) * width..][..width].copy_from_slice(&f(row));
            mask[bi * s + si] = true;
        }
    }
    (Tensor { shape: vec![b, s, width], data }, mask)
}

impl FusionBatch {
    pub fn new(examples: &[&MemeExample], scaling: &InputScaling, task: Task) -> Result<FusionBatch, FusionError> {
        let d_text = examples.first().map_or(0, |e| e.cls.len());
        for e in examples {
            if e.cls.len() != d_text || e.tokens.iter().any(|t| t.len() != d_text) {
                return Err(FusionError::DimensionMismatch(format!("{}: text dimension differs from {d_text}", e.meme_id)));
            }
            if e.eeg.iter().any(|r| r.len() != scaling.eeg.mean.len()) || e.ethr.iter().any(|r| r.len() != scaling.ethr.mean.len()) {
                return Err(FusionError::DimensionMismatch(format!("{}: physiological row width", e.meme_id)));
            }
        }
        let cls = Tensor { shape: vec![examples.len(), d_text], data: examples.iter().flat_map(|e| e.cls.iter().copied()).collect() };
        let toks: Vec<&[Vec<f64>]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let (tokens, token_mask) = pad(&toks, d_text, <[f64]>::to_vec);
        let eeg: Vec<&[Vec<f64>]> = examples.iter().map(|e| e.eeg.as_slice()).collect();
        let (eeg, eeg_mask) = pad(&eeg, scaling.eeg.mean.len(), |r| scaling.eeg.apply(r));
        let ethr: Vec<&[Vec<f64>]> = examples.iter().map(|e| e.ethr.as_slice()).collect();
        let (ethr, ethr_mask) = pad(&ethr, scaling.ethr.mean.len(), |r| scaling.ethr.apply(r));
        let targets = examples.iter().filter_map(|e| task.target(&e.labels)).flatten().collect::<Vec<f64>>();
        let targets = if targets.len() == examples.len() * task.n_outputs() { targets } else { Vec::new() };
        Ok(FusionBatch {
            meme_ids: examples.iter().map(|e| e.meme_id.clone()).collect(),
            cls,
            tokens,
            token_mask,
            eeg,
            eeg_mask,
            ethr,
            ethr_mask,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.meme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meme_ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_fills_missing_with_zero() {
        let rows = vec![vec![1.0, f64::NAN], vec![3.0, 5.0]];
        let s = Standardizer::fit(rows.iter(), 2);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.sd[1], 1.0);
        assert_eq!(s.apply(&[f64::NAN, 7.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn padding_and_masks() {
        let ex = |id: &str, n_eeg: usize| MemeExample {
            meme_id: id.into(),
            cls: vec![1.0, 2.0],
            tokens: vec![vec![0.5, 0.5]; 3 - n_eeg],
            eeg: vec![vec![1.0]; n_eeg],
            ethr: vec![],
            labels: SexismLabels::non_sexist(),
        };
        let (a, b) = (ex("a", 1), ex("b", 2));
        let batch = FusionBatch::new(&[&a, &b], &InputScaling::identity(1, 0), Task::T1).unwrap();
        assert_eq!(batch.tokens.shape, vec![2, 2, 2]);
        assert_eq!(batch.token_mask, vec![true, true, true, false]);
        assert_eq!(batch.eeg_mask, vec![true, false, true, true]);
        assert_eq!(batch.ethr.shape, vec![2, 0, 0]);
        assert_eq!(batch.targets, vec![0.0, 0.0]);
    }
}
