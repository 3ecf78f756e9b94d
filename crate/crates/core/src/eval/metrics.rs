//! Classification metrics: rank AUC and F1 with the 0/0 = 0 convention.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { expected: labels.len(), got: scores.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks doubled so tied mid-ranks stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// All-pairs AUC; quadratic, used as the reference for [`auc`].
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let mut wins2: u64 = 0;
    for &a in &pos {
        for &b in &neg {
            wins2 += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    Ok(wins2 as f64 / (2 * pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// F1 of class 1.
    pub f1_positive: f64,
}

pub fn f1_binary(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }
}

/// Per-class one-vs-rest F1 over class indices `0..n_classes`.
pub fn f1_scores(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<F1Scores, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { expected: labels.len(), got: preds.len() });
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &l) in preds.iter().zip(labels) {
                match (p == c, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            f1_binary(tp, fp, fn_)
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / n_classes.max(1) as f64;
    let f1_positive = per_class.get(1).copied().unwrap_or(0.0);
    Ok(F1Scores { macro_f1, per_class, f1_positive })
}

/// Multi-label F1: per-label positive-class F1; `absent[c]` flags labels
/// with no positive example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelF1 {
    pub macro_f1: f64,
    pub per_label: Vec<f64>,
    pub absent: Vec<bool>,
}

pub fn multilabel_f1(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<MultiLabelF1, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { expected: labels.len(), got: preds.len() });
    }
    let k = labels.first().map_or(0, Vec::len);
    let mut per_label = Vec::with_capacity(k);
    let mut absent = Vec::with_capacity(k);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, l) in preds.iter().zip(labels) {
            match (p[c], l[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        per_label.push(f1_binary(tp, fp, fn_));
        absent.push(tp + fn_ == 0);
    }
    let macro_f1 = per_label.iter().sum::<f64>() / k.max(1) as f64;
    Ok(MultiLabelF1 { macro_f1, per_label, absent })
}

/// Mean of per-label one-vs-rest AUCs; labels with a single class are skipped.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64, EvalError> {
    let k = labels.first().map_or(0, Vec::len);
    let aucs: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            auc(&s, &l).ok()
        })
        .collect();
    if aucs.is_empty() {
        return Err(EvalError::SingleClass);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass));
    }

    #[test]
    fn f1_examples() {
        let f = f1_scores(&[0, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(f.per_class, vec![2.0 / 3.0, 0.0]);
        assert_eq!(f.macro_f1, 1.0 / 3.0);
        assert_eq!(f.f1_positive, 0.0);
        let p = f1_scores(&[1, 0, 2], &[1, 0, 2], 3).unwrap();
        assert_eq!(p.macro_f1, 1.0);
        let relabeled = f1_scores(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1], 2).unwrap();
        let swapped = f1_scores(&[0, 0, 1, 1, 0], &[0, 1, 1, 0, 0], 2).unwrap();
        assert_eq!(relabeled.macro_f1, swapped.macro_f1);
    }

    #[test]
    fn multilabel_absent_class() {
        let labels = vec![vec![true, false], vec![false, false]];
        let preds = vec![vec![true, true], vec![false, false]];
        let m = multilabel_f1(&preds, &labels).unwrap();
        assert_eq!(m.per_label, vec![1.0, 0.0]);
        assert_eq!(m.absent, vec![false, true]);
        assert_eq!(m.macro_f1, 0.5);
    }
}
