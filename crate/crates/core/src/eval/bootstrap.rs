//! Percentile bootstrap over example indices.

use rand::Rng;

use super::EvalError;
use crate::rng::stream;

/// Linear-interpolation percentile of sorted values, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile CI of `metric` over `n_resamples` resamples (with replacement)
/// of `0..n`. Resamples on which the metric is undefined (`Err`) are skipped.
pub fn bootstrap_ci<F>(n: usize, n_resamples: usize, level: f64, seed: u64, label: &str, metric: F) -> Result<(f64, f64), EvalError>
where
    F: Fn(&[usize]) -> Result<f64, EvalError>,
{
    if n < 2 {
        return Err(EvalError::TooFewExamples(format!("bootstrap over {n} examples")));
    }
    let mut rng = stream(seed, &format!("bootstrap:{label}"));
    let mut values = Vec::with_capacity(n_resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..n_resamples {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        if let Ok(m) = metric(&idx) {
            values.push(m);
        }
    }
    if values.is_empty() {
        return Err(EvalError::SingleClass);
    }
    values.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((percentile(&values, a), percentile(&values, 1.0 - a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::auc;

    #[test]
    fn constant_metric_has_zero_width() {
        let (lo, hi) = bootstrap_ci(10, 200, 0.95, 1, "c", |_| Ok(0.7)).unwrap();
        assert_eq!((lo, hi), (0.7, 0.7));
        assert!(bootstrap_ci(1, 10, 0.95, 1, "c", |_| Ok(0.0)).is_err());
    }

    #[test]
    fn ci_contains_estimate_and_is_stable() {
        let mut rng = stream(5, "t");
        let labels: Vec<bool> = (0..500).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l)) * 0.5 + rng.random::<f64>()).collect();
        let metric = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auc(&s, &l)
        };
        let point = auc(&scores, &labels).unwrap();
        let (lo, hi) = bootstrap_ci(500, 1000, 0.95, 3, "auc", metric).unwrap();
        assert!(lo <= point && point <= hi);
        let (lo2, hi2) = bootstrap_ci(500, 2000, 0.95, 3, "auc", metric).unwrap();
        assert!((lo - lo2).abs() < 0.01 && (hi - hi2).abs() < 0.01);
    }
}
