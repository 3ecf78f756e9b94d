//! AdamW with decoupled weight decay and per-parameter learning rates.

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            steps: vec![0; store.params.len()],
        }
    }

    /// Update count of parameter `i`.
    pub fn step_count(&self, i: usize) -> u64 {
        self.steps[i]
    }

    /// One update. `lrs[i] = None` freezes parameter `i` (value and moments
    /// untouched); a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lrs: &[Option<f64>]) -> Result<(), AutodiffError> {
        let n = store.params.len();
        if grads.len() != n || lrs.len() != n || self.m.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                detail: format!("{n} params, {} grads, {} lrs, {} moments", grads.len(), lrs.len(), self.m.len()),
            });
        }
        for i in 0..n {
            let Some(lr) = lrs[i] else { continue };
            let param = &mut store.params[i];
            if let Some(g) = &grads[i] {
                if g.len() != param.value.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adamw_step",
                        detail: format!("{}: grad {} vs param {}", param.name, g.len(), param.value.len()),
                    });
                }
            }
            let p = &mut param.value.data;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                p[j] -= lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
