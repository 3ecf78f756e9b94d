//! Cross-subject feature harmonization.
//!
//! Fixed stage order per harmonized column: Box-Cox, ComBat (batch = subject),
//! winsorization, robust z-scoring. Every parameter is fitted on training rows
//! and stored in [`HarmonizeParams`], so held-out rows are transformed without
//! consulting their own statistics. Missing values are NaN and stay NaN.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HarmonizeError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("batch `{batch}` has {n} rows; ComBat needs at least 2 per batch and 2 batches")]
    SingletonBatch { batch: String, n: usize },
    #[error("ComBat did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("zero MAD")]
    ZeroMad,
    #[error("batch `{0}` was not seen during fitting")]
    UnknownBatch(String),
    #[error("row width {got} does not match {expected} fitted columns")]
    WidthMismatch { expected: usize, got: usize },
}

pub const MAD_CONSISTENCY: f64 = 1.4826;
pub const BOXCOX_LAMBDA_RANGE: (f64, f64) = (-5.0, 5.0);
pub const BOXCOX_TOLERANCE: f64 = 1e-5;
pub const COMBAT_TOLERANCE: f64 = 1e-4;
pub const COMBAT_MAX_ITER: usize = 100;

// ---------------------------------------------------------------- Box-Cox

pub fn boxcox_transform(x: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        x.ln()
    } else {
        (lambda * x.ln()).exp_m1() / lambda
    }
}

/// Box-Cox profile log-likelihood `(λ - 1) Σ ln x - n/2 ln σ̂²(y_λ)`.
pub fn boxcox_llf(x: &[f64], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let y: Vec<f64> = x.iter().map(|&v| boxcox_transform(v, lambda)).collect();
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (lambda - 1.0) * x.iter().map(|v| v.ln()).sum::<f64>() - n / 2.0 * var.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoxParams {
    pub lambda: f64,
    /// Added before transforming; `1 - min(x)` when the fitted data had `min <= 0`.
    pub shift: f64,
}

impl BoxCoxParams {
    pub fn apply(&self, x: f64) -> f64 {
        boxcox_transform((x + self.shift).max(f64::EPSILON), self.lambda)
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Maximum-likelihood λ on [-5, 5] by golden-section search.
pub fn boxcox_fit(x: &[f64]) -> Result<BoxCoxParams, HarmonizeError> {
    let finite: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return Err(HarmonizeError::DegenerateInput(format!("{} finite values", finite.len())));
    }
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(HarmonizeError::DegenerateInput("constant series".into()));
    }
    let shift = if min <= 0.0 { 1.0 - min } else { 0.0 };
    let shifted: Vec<f64> = finite.iter().map(|v| v + shift).collect();
    let (lo, hi) = BOXCOX_LAMBDA_RANGE;
    let lambda = golden_max(|l| boxcox_llf(&shifted, l), lo, hi, BOXCOX_TOLERANCE);
    Ok(BoxCoxParams { lambda, shift })
}

/// Fits λ and returns it with the transformed series.
pub fn boxcox_fit_transform(x: &[f64]) -> Result<(BoxCoxParams, Vec<f64>), HarmonizeError> {
    let p = boxcox_fit(x)?;
    Ok((p, x.iter().map(|&v| if v.is_finite() { p.apply(v) } else { v }).collect()))
}

// ---------------------------------------------------------------- quantiles, winsor, robust z

/// Linear-interpolation quantile of finite values (`h = (n - 1) p`).
pub fn quantile(x: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    let frac = h - i as f64;
    Some(if i + 1 < v.len() { v[i] + frac * (v[i + 1] - v[i]) } else { v[i] })
}

pub fn median(x: &[f64]) -> Option<f64> {
    quantile(x, 0.5)
}

pub fn winsor_limits(x: &[f64], p_lo: f64, p_hi: f64) -> Option<(f64, f64)> {
    Some((quantile(x, p_lo)?, quantile(x, p_hi)?))
}

/// Clamps values outside the `p_lo` / `p_hi` quantiles onto them.
pub fn winsorize(x: &[f64], p_lo: f64, p_hi: f64) -> Vec<f64> {
    match winsor_limits(x, p_lo, p_hi) {
        Some((lo, hi)) => x.iter().map(|&v| if v.is_finite() { v.clamp(lo, hi) } else { v }).collect(),
        None => x.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustScale {
    pub center: f64,
    pub scale: f64,
}

pub fn robust_scale(x: &[f64]) -> Result<RobustScale, HarmonizeError> {
    let med = median(x).ok_or(HarmonizeError::ZeroMad)?;
    let dev: Vec<f64> = x.iter().filter(|v| v.is_finite()).map(|v| (v - med).abs()).collect();
    let mad = median(&dev).ok_or(HarmonizeError::ZeroMad)?;
    if mad <= 0.0 {
        return Err(HarmonizeError::ZeroMad);
    }
    Ok(RobustScale { center: med, scale: MAD_CONSISTENCY * mad })
}

/// `(x - median) / (1.4826 MAD)`.
pub fn robust_z(x: &[f64]) -> Result<Vec<f64>, HarmonizeError> {
    let s = robust_scale(x)?;
    Ok(x.iter().map(|v| (v - s.center) / s.scale).collect())
}

// ---------------------------------------------------------------- ComBat

/// Parametric empirical-Bayes ComBat estimates, one entry per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComBatParams {
    pub batches: Vec<String>,
    pub grand_mean: Vec<f64>,
    pub var_pooled: Vec<f64>,
    /// `[batch][feature]` additive effect on the standardized scale.
    pub gamma_star: Vec<Vec<f64>>,
    /// `[batch][feature]` multiplicative (variance) effect.
    pub delta_star: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { f64::NAN };
    (m, var)
}

/// Fits ComBat on `rows` (NaN = missing) with one batch label per row.
///
/// Standardization uses the grand mean and the pooled within-batch variance
/// (denominator N - k). γ and δ² are shrunk toward a normal and an
/// inverse-gamma prior whose hyperparameters come from the method of moments
/// across features; a prior whose spread across features is zero (or that
/// cannot be estimated from a single feature) leaves the per-batch estimate
/// unshrunk.
pub fn combat_fit(rows: &[Vec<f64>], batch_ids: &[String]) -> Result<ComBatParams, HarmonizeError> {
    let width = rows.first().map_or(0, Vec::len);
    let mut batches: Vec<String> = batch_ids.to_vec();
    batches.sort();
    batches.dedup();
    if batches.len() < 2 {
        return Err(HarmonizeError::SingletonBatch {
            batch: batches.first().cloned().unwrap_or_default(),
            n: rows.len(),
        });
    }
    let index: BTreeMap<&str, usize> = batches.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let row_batch: Vec<usize> = batch_ids.iter().map(|b| index[b.as_str()]).collect();
    let kb = batches.len();

    let mut grand_mean = vec![0.0; width];
    let mut var_pooled = vec![0.0; width];
    let mut gamma_hat = vec![vec![0.0; width]; kb];
    let mut delta_hat = vec![vec![0.0; width]; kb];
    let mut counts = vec![vec![0usize; width]; kb];
    // standardized values per feature per batch
    let mut z: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); kb]; width];

    for j in 0..width {
        let mut per_batch: Vec<Vec<f64>> = vec![Vec::new(); kb];
        for (r, &b) in rows.iter().zip(&row_batch) {
            if r[j].is_finite() {
                per_batch[b].push(r[j]);
            }
        }
        for (b, v) in per_batch.iter().enumerate() {
            if v.len() < 2 {
                return Err(HarmonizeError::SingletonBatch { batch: batches[b].clone(), n: v.len() });
            }
        }
        let n_total: usize = per_batch.iter().map(Vec::len).sum();
        let gm = per_batch.iter().flatten().sum::<f64>() / n_total as f64;
        let ss: f64 = per_batch
            .iter()
            .map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
            })
            .sum();
        let vp = ss / (n_total - kb) as f64;
        if vp <= 0.0 {
            return Err(HarmonizeError::DegenerateInput(format!("feature {j} has zero within-batch variance")));
        }
        grand_mean[j] = gm;
        var_pooled[j] = vp;
        for (b, v) in per_batch.iter().enumerate() {
            let s: Vec<f64> = v.iter().map(|x| (x - gm) / vp.sqrt()).collect();
            let (m, var) = mean_var(&s);
            gamma_hat[b][j] = m;
            delta_hat[b][j] = var;
            counts[b][j] = s.len();
            z[j][b] = s;
        }
    }

    let mut gamma_star = vec![vec![0.0; width]; kb];
    let mut delta_star = vec![vec![0.0; width]; kb];
    let mut iterations = 0;
    for b in 0..kb {
        let (gamma_bar, tau2) = mean_var(&gamma_hat[b]);
        let (m, s2) = mean_var(&delta_hat[b]);
        let shrink_gamma = tau2.is_finite();
        let shrink_delta = s2.is_finite() && s2 > 1e-12 * m * m;
        let (a_prior, b_prior) = if shrink_delta {
            ((2.0 * s2 + m * m) / s2, (m * s2 + m * m * m) / s2)
        } else {
            (f64::NAN, f64::NAN)
        };
        for j in 0..width {
            let n = counts[b][j] as f64;
            let mut g_old = gamma_hat[b][j];
            let mut d_old = delta_hat[b][j];
            let mut converged = false;
            for it in 1..=COMBAT_MAX_ITER {
                let g_new = if shrink_gamma {
                    (tau2 * n * gamma_hat[b][j] + d_old * gamma_bar) / (tau2 * n + d_old)
                } else {
                    gamma_hat[b][j]
                };
                let d_new = if shrink_delta {
                    let sum2: f64 = z[j][b].iter().map(|x| (x - g_new).powi(2)).sum();
                    (0.5 * sum2 + b_prior) / (n / 2.0 + a_prior - 1.0)
                } else {
                    delta_hat[b][j]
                };
                let change = (g_new - g_old).abs().max((d_new - d_old).abs());
                g_old = g_new;
                d_old = d_new;
                iterations = iterations.max(it);
                if change < COMBAT_TOLERANCE {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(HarmonizeError::NonConvergence { iterations: COMBAT_MAX_ITER });
            }
            gamma_star[b][j] = g_old;
            delta_star[b][j] = d_old;
        }
    }
    Ok(ComBatParams { batches, grand_mean, var_pooled, gamma_star, delta_star, iterations })
}

impl ComBatParams {
    pub fn apply_row(&self, row: &[f64], batch: &str) -> Result<Vec<f64>, HarmonizeError> {
        let b = self
            .batches
            .binary_search_by(|x| x.as_str().cmp(batch))
            .map_err(|_| HarmonizeError::UnknownBatch(batch.to_string()))?;
        if row.len() != self.grand_mean.len() {
            return Err(HarmonizeError::WidthMismatch { expected: self.grand_mean.len(), got: row.len() });
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let sd = self.var_pooled[j].sqrt();
                let s = (x - self.grand_mean[j]) / sd;
                (s - self.gamma_star[b][j]) / self.delta_star[b][j].sqrt() * sd + self.grand_mean[j]
            })
            .collect())
    }

    pub fn apply(&self, rows: &[Vec<f64>], batch_ids: &[String]) -> Result<Vec<Vec<f64>>, HarmonizeError> {
        rows.iter().zip(batch_ids).map(|(r, b)| self.apply_row(r, b)).collect()
    }
}

// ---------------------------------------------------------------- full pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonizeScope {
    /// Only `eeg_` columns are harmonized; others pass through.
    #[default]
    EegOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonizeConfig {
    pub scope: HarmonizeScope,
    pub winsor: (f64, f64),
    /// Rows from a batch absent at fit time skip the batch correction
    /// instead of failing with `UnknownBatch`; batches with a single fitting
    /// row are left out of the fit and treated the same way.
    #[serde(default)]
    pub unseen_batch_identity: bool,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        HarmonizeConfig { scope: HarmonizeScope::EegOnly, winsor: (0.01, 0.99), unseen_batch_identity: false }
    }
}

impl HarmonizeConfig {
    pub fn includes(&self, column: &str) -> bool {
        match self.scope {
            HarmonizeScope::All => true,
            HarmonizeScope::EegOnly => column.starts_with("eeg_"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnParams {
    pub name: String,
    pub boxcox: BoxCoxParams,
    pub winsor: (f64, f64),
    pub robust: RobustScale,
}

/// Fitted harmonization for a feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizeParams {
    pub config: HarmonizeConfig,
    /// All input column names, in order.
    pub input_columns: Vec<String>,
    /// Harmonized columns with their per-column parameters.
    pub columns: Vec<ColumnParams>,
    pub combat: ComBatParams,
    /// Harmonized-scope columns removed because of zero MAD or degenerate input.
    pub dropped: Vec<String>,
}

/// Fits the pipeline on training rows. Rows without any in-scope value are
/// ignored. Columns in scope whose training values are constant or have zero
/// MAD after the earlier stages are dropped.
pub fn fit(
    columns: &[String],
    rows: &[Vec<f64>],
    batch_ids: &[String],
    config: HarmonizeConfig,
) -> Result<HarmonizeParams, HarmonizeError> {
    let scoped: Vec<usize> = (0..columns.len()).filter(|&j| config.includes(&columns[j])).collect();
    let (rows, batch_ids): (Vec<Vec<f64>>, Vec<String>) = rows
        .iter()
        .zip(batch_ids)
        .filter(|(r, _)| scoped.iter().any(|&j| r[j].is_finite()))
        .map(|(r, b)| (r.clone(), b.clone()))
        .unzip();
    let (rows, batch_ids) = if config.unseen_batch_identity {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for b in &batch_ids {
            *counts.entry(b.as_str()).or_default() += 1;
        }
        let single: Vec<&str> = counts.iter().filter(|(_, &n)| n < 2).map(|(b, _)| *b).collect();
        if !single.is_empty() {
            log::warn!("batches with one row are left uncorrected: {}", single.join(", "));
        }
        rows.iter().zip(&batch_ids).filter(|(_, b)| counts[b.as_str()] >= 2).map(|(r, b)| (r.clone(), b.clone())).unzip()
    } else {
        (rows, batch_ids)
    };
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut boxcox = Vec::new();
    for (j, name) in columns.iter().enumerate() {
        if !config.includes(name) {
            continue;
        }
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        match boxcox_fit(&col) {
            Ok(p) => {
                keep.push(j);
                boxcox.push(p);
            }
            Err(HarmonizeError::DegenerateInput(_)) => {
                log::warn!("dropping degenerate column {name}");
                dropped.push(name.clone());
            }
            Err(e) => return Err(e),
        }
    }
    let transformed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| keep.iter().zip(&boxcox).map(|(&j, p)| if r[j].is_finite() { p.apply(r[j]) } else { f64::NAN }).collect())
        .collect();
    let combat = combat_fit(&transformed, &batch_ids)?;
    let corrected = combat.apply(&transformed, &batch_ids)?;

    let mut params = Vec::new();
    let mut kept_combat = Vec::new();
    for (k, &j) in keep.iter().enumerate() {
        let col: Vec<f64> = corrected.iter().map(|r| r[k]).collect();
        let limits = winsor_limits(&col, config.winsor.0, config.winsor.1);
        let robust = limits.and_then(|(lo, hi)| {
            let w: Vec<f64> = col.iter().map(|v| if v.is_finite() { v.clamp(lo, hi) } else { *v }).collect();
            robust_scale(&w).ok()
        });
        match (limits, robust) {
            (Some(winsor), Some(robust)) => {
                params.push(ColumnParams { name: columns[j].clone(), boxcox: boxcox[k], winsor, robust });
                kept_combat.push(k);
            }
            _ => {
                log::warn!("dropping column {} (zero MAD on training rows)", columns[j]);
                dropped.push(columns[j].clone());
            }
        }
    }
    let combat = ComBatParams {
        grand_mean: kept_combat.iter().map(|&k| combat.grand_mean[k]).collect(),
        var_pooled: kept_combat.iter().map(|&k| combat.var_pooled[k]).collect(),
        gamma_star: combat.gamma_star.iter().map(|g| kept_combat.iter().map(|&k| g[k]).collect()).collect(),
        delta_star: combat.delta_star.iter().map(|d| kept_combat.iter().map(|&k| d[k]).collect()).collect(),
        ..combat
    };
    Ok(HarmonizeParams { config, input_columns: columns.to_vec(), columns: params, combat, dropped })
}

impl HarmonizeParams {
    /// Output column names: harmonized columns (in input order) followed by
    /// pass-through columns outside the scope.
    pub fn output_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = self.columns.iter().map(|c| c.name.clone()).collect();
        out.extend(self.input_columns.iter().filter(|c| !self.config.includes(c)).cloned());
        out
    }

    pub fn apply_row(&self, row: &[f64], batch: &str) -> Result<Vec<f64>, HarmonizeError> {
        if row.len() != self.input_columns.len() {
            return Err(HarmonizeError::WidthMismatch { expected: self.input_columns.len(), got: row.len() });
        }
        let pos: BTreeMap<&str, usize> =
            self.input_columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let bc: Vec<f64> = self
            .columns
            .iter()
            .map(|c| {
                let v = row[pos[c.name.as_str()]];
                if v.is_finite() { c.boxcox.apply(v) } else { f64::NAN }
            })
            .collect();
        let cb = if bc.iter().all(|v| !v.is_finite()) {
            bc
        } else {
            match self.combat.apply_row(&bc, batch) {
                Err(HarmonizeError::UnknownBatch(_)) if self.config.unseen_batch_identity => bc,
                other => other?,
            }
        };
        let mut out: Vec<f64> = cb
            .iter()
            .zip(&self.columns)
            .map(|(&v, c)| if v.is_finite() { (v.clamp(c.winsor.0, c.winsor.1) - c.robust.center) / c.robust.scale } else { v })
            .collect();
        out.extend(
            self.input_columns
                .iter()
                .zip(row)
                .filter(|(c, _)| !self.config.includes(c))
                .map(|(_, &v)| v),
        );
        Ok(out)
    }

    pub fn apply(&self, rows: &[Vec<f64>], batch_ids: &[String]) -> Result<Vec<Vec<f64>>, HarmonizeError> {
        rows.iter().zip(batch_ids).map(|(r, b)| self.apply_row(r, b)).collect()
    }
}
