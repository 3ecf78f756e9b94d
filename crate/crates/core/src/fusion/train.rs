//! Two-phase training, validation tracking and inference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{param_group, FusionDims, FusionError, FusionModel, InputScaling, MemeExample, ParamGroup, Precision, Task};
use crate::autodiff::{AdamW, AutodiffError, Graph};
use crate::eval::{auc, f1_scores, macro_auc, multilabel_f1};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub phase: u8,
    pub split: String,
    pub loss: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro F1.
    pub model: FusionModel,
    pub best_epoch: usize,
    pub log: Vec<TrainLogRecord>,
}

/// Inverse-odds weights `neg / pos` per output (1 when a class is absent).
pub fn pos_weights(targets: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let pos = targets.iter().filter(|t| t[c] > 0.5).count();
            let neg = targets.len() - pos;
            if pos == 0 || neg == 0 { 1.0 } else { neg as f64 / pos as f64 }
        })
        .collect()
}

/// Examples inside the task's scope.
pub fn in_scope(examples: &[MemeExample], task: Task) -> Vec<&MemeExample> {
    examples.iter().filter(|e| task.target(&e.labels).is_some()).collect()
}

fn dims_of(examples: &[&MemeExample]) -> FusionDims {
    FusionDims {
        d_text: examples.first().map_or(0, |e| e.cls.len()),
        f_eeg: examples.iter().flat_map(|e| e.eeg.first()).map(Vec::len).next().unwrap_or(0),
        f_ethr: examples.iter().flat_map(|e| e.ethr.first()).map(Vec::len).next().unwrap_or(0),
    }
}

/// Metrics on one split: (loss, macro F1, AUC).
pub fn evaluate(model: &FusionModel, examples: &[&MemeExample], pos_weight: &[f64]) -> Result<(f64, f64, Option<f64>), FusionError> {
    let task = model.config.task;
    let probs = predict(model, examples)?;
    let targets: Vec<Vec<f64>> = examples.iter().map(|e| task.target(&e.labels).expect("in scope")).collect();
    let k = task.n_outputs();
    let mut loss = 0.0;
    for (p, t) in probs.iter().zip(&targets) {
        for c in 0..k {
            let q = p[c].clamp(1e-15, 1.0 - 1e-15);
            loss -= pos_weight[c] * t[c] * q.ln() + (1.0 - t[c]) * (1.0 - q).ln();
        }
    }
    loss /= (probs.len() * k).max(1) as f64;
    let (f1, auc_v) = scores(task, examples, &probs);
    Ok((loss, f1, auc_v))
}

/// Macro F1 at threshold 0.5 and AUC (macro over labels for T3).
pub fn scores(task: Task, examples: &[&MemeExample], probs: &[Vec<f64>]) -> (f64, Option<f64>) {
    let targets: Vec<Vec<f64>> = examples.iter().map(|e| task.target(&e.labels).expect("in scope")).collect();
    match task {
        Task::T1 | Task::T2 => {
            let labels: Vec<usize> = targets.iter().map(|t| usize::from(t[0] > 0.5)).collect();
            let preds: Vec<usize> = probs.iter().map(|p| usize::from(p[0] >= 0.5)).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            (f1_scores(&preds, &labels, 2).map(|f| f.macro_f1).unwrap_or(0.0), auc(&scores, &bools).ok())
        }
        Task::T3 => {
            let labels: Vec<Vec<bool>> = targets.iter().map(|t| t.iter().map(|&v| v > 0.5).collect()).collect();
            let preds: Vec<Vec<bool>> = probs.iter().map(|p| p.iter().map(|&v| v >= 0.5).collect()).collect();
            (multilabel_f1(&preds, &labels).map(|f| f.macro_f1).unwrap_or(0.0), macro_auc(probs, &labels).ok())
        }
    }
}

/// Probabilities per example, in batches, without dropout.
pub fn predict(model: &FusionModel, examples: &[&MemeExample]) -> Result<Vec<Vec<f64>>, FusionError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(model.config.batch_size.max(1)) {
        out.extend(model.predict_proba(chunk)?);
    }
    Ok(out)
}

/// Learning rate per parameter for a phase; `None` = frozen.
pub fn phase_lrs(model: &FusionModel, phase: u8) -> Vec<Option<f64>> {
    let c = &model.config;
    model
        .params
        .params
        .iter()
        .map(|p| match (phase, param_group(&p.name)) {
            (1, ParamGroup::AdapterLower | ParamGroup::AdapterUpper) => None,
            (1, ParamGroup::Fusion) => Some(c.phase1_lr),
            (_, ParamGroup::AdapterLower) => Some(c.phase2_lrs.lower),
            (_, ParamGroup::AdapterUpper) => Some(c.phase2_lrs.upper),
            (_, ParamGroup::Fusion) => Some(c.phase2_lrs.head),
        })
        .collect()
}

/// Trains a fresh model on `train`, selecting the epoch with the best
/// macro F1 on `val` (the later epoch on ties; the last epoch when `val` is
/// empty). Input scaling and
/// class weights come from the training examples only.
pub fn train(
    config: &super::FusionConfig,
    train: &[MemeExample],
    val: &[MemeExample],
    seed: u64,
) -> Result<TrainOutcome, FusionError> {
    config.validate()?;
    let task = config.task;
    let tr = in_scope(train, task);
    let va = in_scope(val, task);
    if tr.is_empty() {
        return Err(FusionError::EmptyTrainingSet);
    }
    let dims = dims_of(&tr);
    let owned: Vec<MemeExample> = tr.iter().map(|e| (*e).clone()).collect();
    let scaling = InputScaling::fit(&owned, dims.f_eeg, dims.f_ethr);
    let mut model = FusionModel::new(config.clone(), dims, scaling, seed)?;
    let targets: Vec<Vec<f64>> = tr.iter().map(|e| task.target(&e.labels).expect("in scope")).collect();
    let pw = config.pos_weights.clone().unwrap_or_else(|| pos_weights(&targets, task.n_outputs()));

    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let schedule = (0..config.phase1_epochs).map(|_| 1u8).chain((0..config.phase2_epochs).map(|_| 2u8));
    for (epoch, phase) in schedule.enumerate() {
        let lrs = phase_lrs(&model, phase);
        let mut order: Vec<usize> = (0..tr.len()).collect();
        order.shuffle(&mut stream(seed, &format!("shuffle:{epoch}")));
        let mut dropout_rng = stream(seed, &format!("dropout:{epoch}"));
        let mut epoch_loss = 0.0;
        let mut seen: Vec<&MemeExample> = Vec::with_capacity(tr.len());
        let mut seen_probs: Vec<Vec<f64>> = Vec::with_capacity(tr.len());
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let exs: Vec<&MemeExample> = chunk.iter().map(|&i| tr[i]).collect();
            let batch = model.batch(&exs)?;
            let diverged = |detail: String| FusionError::DivergedLoss { epoch, phase, batch: bi, detail };
            let mut g = Graph::new();
            let vars = match model.forward_graph(&mut g, &model.params, &batch, Some(&mut dropout_rng)) {
                Ok(v) => v,
                Err(FusionError::Autodiff(AutodiffError::NonFinite { op })) => {
                    return Err(diverged(format!("non-finite {op} output; memes {:?}", batch.meme_ids)))
                }
                Err(e) => return Err(e),
            };
            let loss = g
                .weighted_bce(vars.logits, &batch.targets, &pw)
                .map_err(|e| diverged(format!("{e}; memes {:?}", batch.meme_ids)))?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(diverged(format!("loss {lv}; memes {:?}", batch.meme_ids)));
            }
            epoch_loss += lv * exs.len() as f64;
            let k = task.n_outputs();
            seen_probs.extend(g.value(vars.logits).data.chunks(k).map(|r| r.iter().map(|&z| super::sigmoid(z)).collect()));
            seen.extend(exs.iter().copied());
            let grads = g.backward(loss).for_params(model.params.params.len());
            opt.step(&mut model.params, &grads, &lrs)?;
            if config.precision == Precision::F32 {
                model.params.round_to_f32();
            }
        }
        let (train_f1, train_auc) = scores(task, &seen, &seen_probs);
        log.push(TrainLogRecord {
            epoch,
            phase,
            split: "train".into(),
            loss: epoch_loss / tr.len() as f64,
            macro_f1: train_f1,
            auc: train_auc,
        });
        let score = if va.is_empty() {
            epoch as f64
        } else {
            let (loss, f1, auc_v) = evaluate(&model, &va, &pw)?;
            log.push(TrainLogRecord { epoch, phase, split: "val".into(), loss, macro_f1: f1, auc: auc_v });
            f1
        };
        log::debug!("epoch {epoch} phase {phase}: train loss {:.4}, selection score {score:.4}", epoch_loss / tr.len() as f64);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome { model, best_epoch, log })
}
