//! Cross-validated ablation runs over a feature table and text embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{auc, bootstrap_ci, f1_scores, macro_auc, make_folds, multilabel_f1, EvalError, FoldPlan};
use crate::features::FeatureTable;
use crate::fusion::train::in_scope;
use crate::fusion::{build_examples, train, Ablation, FusionConfig, FusionError, MemeExample, Task};
use crate::harmonize::{self, HarmonizeConfig, HarmonizeError};
use crate::io::Embedding;
use crate::rng::stream;
use crate::types::Category;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub k: usize,
    pub n_resamples: usize,
    pub level: f64,
    /// Share of each training split held out for checkpoint selection.
    pub val_fraction: f64,
    pub tasks: Vec<Task>,
    pub ablations: Vec<Ablation>,
    pub harmonize: HarmonizeConfig,
    /// Base model/training settings; `task` and `ablation` are set per run.
    pub fusion: FusionConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            k: 5,
            n_resamples: 1000,
            level: 0.95,
            val_fraction: 0.2,
            tasks: Task::ALL.to_vec(),
            ablations: Ablation::ALL.to_vec(),
            harmonize: HarmonizeConfig { unseen_batch_identity: true, ..Default::default() },
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task: Task,
    pub ablation: Ablation,
    pub fold: usize,
    pub meme_id: String,
    pub probs: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub macro_f1: f64,
    pub f1_positive: f64,
    /// `None` when the fold has a single class.
    pub auc: Option<f64>,
    /// Per-category F1 (T3 only).
    pub per_class_f1: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub task: Task,
    pub ablation: Ablation,
    pub macro_f1: MetricSummary,
    pub f1_positive: MetricSummary,
    pub auc: MetricSummary,
    pub folds: Vec<FoldMetrics>,
    /// T3 categories without any positive example in some test fold.
    pub absent_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: Vec<ConfigResult>,
    pub predictions: Vec<PredictionRecord>,
    pub fold_plans: BTreeMap<Task, FoldPlan>,
}

impl EvalReport {
    pub fn result(&self, task: Task, ablation: Ablation) -> Option<&ConfigResult> {
        self.results.iter().find(|r| r.task == task && r.ablation == ablation)
    }
}

/// Stratum used for fold assignment: the binary target for T1/T2, the
/// first category in canonical order for T3 (5 when none).
fn stratum(task: Task, target: &[f64]) -> usize {
    match task {
        Task::T1 | Task::T2 => usize::from(target[0] > 0.5),
        Task::T3 => target.iter().position(|&v| v > 0.5).unwrap_or(Category::ALL.len()),
    }
}

/// Folds for a task over the memes in its scope. Strata smaller than `k` are
/// pooled into one; a pool still smaller than `k` joins the largest stratum.
pub fn task_folds(table: &FeatureTable, task: Task, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    let mut memes: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &table.meta {
        if let Some(t) = task.target(&m.labels) {
            memes.insert(&m.meme_id, stratum(task, &t));
        }
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in memes.values() {
        *counts.entry(*s).or_default() += 1;
    }
    let pooled: usize = counts.values().filter(|&&n| n < k).sum();
    // a pool still smaller than k joins the largest stratum
    let pool_id = if pooled > 0 && pooled < k {
        counts.iter().filter(|(_, &n)| n >= k).max_by_key(|(s, &n)| (n, std::cmp::Reverse(**s))).map_or(usize::MAX, |(s, _)| *s)
    } else {
        usize::MAX
    };
    let pairs: Vec<(String, usize)> =
        memes.iter().map(|(m, s)| (m.to_string(), if counts[s] < k { pool_id } else { *s })).collect();
    make_folds(&pairs, k, seed)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

/// (macro F1, F1+, AUC, per-class F1) of a set of predictions.
fn metrics(task: Task, probs: &[&[f64]], targets: &[&[f64]]) -> (f64, f64, Result<f64, EvalError>, Vec<f64>) {
    match task {
        Task::T1 | Task::T2 => {
            let labels: Vec<usize> = targets.iter().map(|t| usize::from(t[0] > 0.5)).collect();
            let preds: Vec<usize> = probs.iter().map(|p| usize::from(p[0] >= 0.5)).collect();
            let f = f1_scores(&preds, &labels, 2).expect("aligned");
            let scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            (f.macro_f1, f.f1_positive, auc(&scores, &bools), Vec::new())
        }
        Task::T3 => {
            let labels: Vec<Vec<bool>> = targets.iter().map(|t| t.iter().map(|&v| v > 0.5).collect()).collect();
            let preds: Vec<Vec<bool>> = probs.iter().map(|p| p.iter().map(|&v| v >= 0.5).collect()).collect();
            let f = multilabel_f1(&preds, &labels).expect("aligned");
            let scores: Vec<Vec<f64>> = probs.iter().map(|p| p.to_vec()).collect();
            (f.macro_f1, f.macro_f1, macro_auc(&scores, &labels), f.per_label)
        }
    }
}

/// Stratified hold-out of `fraction` of the in-scope examples; every stratum
/// keeps at least one training example.
pub fn split_validation(examples: &[MemeExample], task: Task, fraction: f64, seed: u64, label: &str) -> (Vec<MemeExample>, Vec<MemeExample>) {
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        if let Some(t) = task.target(&e.labels) {
            strata.entry(stratum(task, &t)).or_default().push(i);
        }
    }
    let mut rng = stream(seed, label);
    let mut val: BTreeSet<usize> = BTreeSet::new();
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64) * fraction).round() as usize;
        val.extend(idx.iter().take(n.min(idx.len().saturating_sub(1))));
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        if val.contains(&i) { va.push(e.clone()) } else { tr.push(e.clone()) }
    }
    (tr, va)
}

/// Harmonizes the table with parameters fit on the training memes only.
fn harmonized_table(table: &FeatureTable, training: &BTreeSet<&str>, config: HarmonizeConfig) -> Result<FeatureTable, HarmonizeError> {
    let batches: Vec<String> = table.meta.iter().map(|m| m.subject_id.clone()).collect();
    let (rows, ids): (Vec<Vec<f64>>, Vec<String>) = table
        .meta
        .iter()
        .zip(&table.values)
        .zip(&batches)
        .filter(|((m, _), _)| training.contains(m.meme_id.as_str()))
        .map(|((_, r), b)| (r.clone(), b.clone()))
        .unzip();
    let params = harmonize::fit(&table.columns, &rows, &ids, config)?;
    Ok(FeatureTable { columns: params.output_columns(), meta: table.meta.clone(), values: params.apply(&table.values, &batches)? })
}

/// Trains and evaluates every (task, ablation) over `k` meme-level folds.
/// Harmonization is refit on each training split. Folds run in parallel;
/// results are assembled in fold order.
pub fn run_ablation_suite(
    table: &FeatureTable,
    embeddings: &BTreeMap<String, Embedding>,
    config: &SuiteConfig,
    seed: u64,
) -> Result<EvalReport, SuiteError> {
    let mut results = Vec::new();
    let mut predictions = Vec::new();
    let mut fold_plans = BTreeMap::new();
    for &task in &config.tasks {
        let plan = task_folds(table, task, config.k, seed)?;
        type FoldOut = Vec<(Ablation, FoldMetrics, Vec<PredictionRecord>)>;
        let per_fold: Vec<FoldOut> = (0..config.k)
            .into_par_iter()
            .map(|fold| -> Result<FoldOut, SuiteError> {
                let training: BTreeSet<&str> = plan.folds.iter().enumerate().filter(|(j, _)| *j != fold).flat_map(|(_, f)| f.iter().map(String::as_str)).collect();
                let harmonized = harmonized_table(table, &training, config.harmonize)?;
                let all = build_examples(&harmonized, embeddings)?;
                let (train_all, test): (Vec<MemeExample>, Vec<MemeExample>) = all.into_iter().partition(|e| training.contains(e.meme_id.as_str()));
                let (tr, va) = split_validation(&train_all, task, config.val_fraction, seed, &format!("val:{}:{fold}", task.as_str()));
                let test = in_scope(&test, task);
                let mut out = Vec::new();
                for &ablation in &config.ablations {
                    let fc = FusionConfig { task, ablation, ..config.fusion.clone() };
                    let trained = train(&fc, &tr, &va, seed)?;
                    let probs = crate::fusion::predict(&trained.model, &test)?;
                    let targets: Vec<Vec<f64>> = test.iter().map(|e| task.target(&e.labels).expect("in scope")).collect();
                    let p: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
                    let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
                    let (macro_f1, f1_positive, auc_v, per_class_f1) = metrics(task, &p, &t);
                    let fm = FoldMetrics { fold, macro_f1, f1_positive, auc: auc_v.ok(), per_class_f1, best_epoch: trained.best_epoch };
                    let preds = test
                        .iter()
                        .zip(probs.iter().zip(&targets))
                        .map(|(e, (p, t))| PredictionRecord { task, ablation, fold, meme_id: e.meme_id.clone(), probs: p.clone(), targets: t.clone() })
                        .collect();
                    log::info!("{} {} fold {fold}: macro F1 {macro_f1:.3}, AUC {:?}", task.as_str(), ablation.as_str(), fm.auc);
                    out.push((ablation, fm, preds));
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;

        for &ablation in &config.ablations {
            let folds: Vec<FoldMetrics> = per_fold.iter().flat_map(|f| f.iter().filter(|(a, _, _)| *a == ablation).map(|(_, m, _)| m.clone())).collect();
            let preds: Vec<PredictionRecord> = per_fold.iter().flat_map(|f| f.iter().filter(|(a, _, _)| *a == ablation).flat_map(|(_, _, p)| p.clone())).collect();
            let label = format!("{}:{}", task.as_str(), ablation.as_str());
            let ci = |which: usize| {
                bootstrap_ci(preds.len(), config.n_resamples, config.level, seed, &format!("{label}:{which}"), |idx| {
                    let p: Vec<&[f64]> = idx.iter().map(|&i| preds[i].probs.as_slice()).collect();
                    let t: Vec<&[f64]> = idx.iter().map(|&i| preds[i].targets.as_slice()).collect();
                    let (f1, f1p, a, _) = metrics(task, &p, &t);
                    match which {
                        0 => Ok(f1),
                        1 => Ok(f1p),
                        _ => a,
                    }
                })
            };
            let summary = |values: Vec<f64>, which: usize| -> Result<MetricSummary, EvalError> {
                let (mean, sd) = mean_sd(&values);
                Ok(MetricSummary { mean, sd, ci: ci(which)? })
            };
            let mut absent = BTreeSet::new();
            if task == Task::T3 {
                for f in 0..config.k {
                    for (c, cat) in Category::ALL.iter().enumerate() {
                        if !preds.iter().any(|p| p.fold == f && p.targets[c] > 0.5) {
                            absent.insert(cat.as_str().to_string());
                        }
                    }
                }
            }
            results.push(ConfigResult {
                task,
                ablation,
                macro_f1: summary(folds.iter().map(|f| f.macro_f1).collect(), 0)?,
                f1_positive: summary(folds.iter().map(|f| f.f1_positive).collect(), 1)?,
                auc: summary(folds.iter().filter_map(|f| f.auc).collect(), 2)?,
                folds,
                absent_classes: absent.into_iter().collect(),
            });
            predictions.extend(preds);
        }
        fold_plans.insert(task, plan);
    }
    Ok(EvalReport { results, predictions, fold_plans })
}
