//! Central finite-difference gradient checks.

use super::{AutodiffError, Graph, ParamStore, Var};

/// Largest relative error between analytic and central-difference gradients
/// over every parameter value, using `|a - n| / max(1, |a|, |n|)`. The
/// numeric gradient uses the five-point central stencil
/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`, whose O(h^4)
/// truncation error stays far below the tolerance on sharply curved ops
/// such as layer norm over two features.
///
/// `build` must construct a scalar loss from the store on a fresh graph
/// deterministically (no dropout).
pub fn max_relative_error<F>(store: &ParamStore, h: f64, build: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss).for_params(store.params.len());
    let eval = |s: &ParamStore| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).data[0])
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (i, p) in store.params.iter().enumerate() {
        for j in 0..p.value.len() {
            let x = p.value.data[j];
            let mut at = |dx: f64| -> Result<f64, AutodiffError> {
                probe.params[i].value.data[j] = x + dx;
                eval(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            probe.params[i].value.data[j] = x;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::autodiff::Tensor;

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-6;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| StandardNormal.sample(rng)).collect() }
    }

    fn store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        for (name, shape) in shapes {
            s.add(name, randn(&mut rng, shape));
        }
        s
    }

    /// Weighted sum so the upstream gradient is not uniform.
    fn probe_loss(g: &mut Graph, y: Var) -> Result<Var, AutodiffError> {
        let w = Tensor { shape: vec![g.value(y).cols(), 1], data: (0..g.value(y).cols()).map(|i| 0.3 + 0.17 * i as f64).collect() };
        let w = g.constant(w);
        let z = g.linear(y, w, None)?;
        let z2 = g.gelu(z)?;
        g.sum(z2)
    }

    #[test]
    fn linear_grad() {
        let s = store(1, &[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])]);
        let err = max_relative_error(&s, H, |g, s| {
            let (x, w, b) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            let y = g.linear(x, w, Some(b))?;
            probe_loss(g, y)
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gelu_layernorm_concat_grad() {
        let s = store(2, &[("x", &[3, 6]), ("y", &[3, 2]), ("g", &[6]), ("b", &[6])]);
        let err = max_relative_error(&s, H, |g, s| {
            let (x, y, ga, be) = (g.param(s, 0), g.param(s, 1), g.param(s, 2), g.param(s, 3));
            let n = g.layer_norm(x, ga, be)?;
            let a = g.gelu(n)?;
            let c = g.concat(&[a, y])?;
            let d = g.scale(c, 0.7)?;
            let e = g.add(d, c)?;
            probe_loss(g, e)
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn cross_attention_grad() {
        let s = store(
            3,
            &[
                ("q_in", &[2, 3, 6]),
                ("kv_in", &[2, 5, 7]),
                ("wq", &[6, 8]),
                ("bq", &[8]),
                ("wk", &[7, 8]),
                ("bk", &[8]),
                ("wv", &[7, 8]),
                ("bv", &[8]),
                ("wo", &[8, 8]),
                ("bo", &[8]),
            ],
        );
        let mask = [true, true, true, false, true, true, false, true, true, true];
        let err = max_relative_error(&s, H, |g, s| {
            let p: Vec<Var> = (0..10).map(|i| g.param(s, i)).collect();
            let q = g.linear(p[0], p[2], Some(p[3]))?;
            let k = g.linear(p[1], p[4], Some(p[5]))?;
            let v = g.linear(p[1], p[6], Some(p[7]))?;
            let a = g.attention(q, k, v, &mask, 2)?;
            let o = g.linear(a, p[8], Some(p[9]))?;
            probe_loss(g, o)
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn attention_pool_grad() {
        let s = store(4, &[("x", &[3, 4, 5]), ("w", &[5])]);
        let mask = [true, true, false, true, true, false, false, false, false, true, true, true];
        let err = max_relative_error(&s, H, |g, s| {
            let (x, w) = (g.param(s, 0), g.param(s, 1));
            let p = g.attention_pool(x, w, &mask, false)?;
            probe_loss(g, p)
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn weighted_bce_grad() {
        let s = store(5, &[("z", &[4, 3])]);
        let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let err = max_relative_error(&s, H, |g, s| {
            let z = g.param(s, 0);
            g.weighted_bce(z, &targets, &[2.0, 0.5, 1.5])
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let s = store(6, &[("x", &[2, 3]), ("w", &[3, 3])]);
        let err = max_relative_error(&s, H, |g, s| {
            let (x, w) = (g.param(s, 0), g.param(s, 1));
            let w2 = g.param(s, 1);
            let y = g.linear(x, w, None)?;
            let z = g.linear(y, w2, None)?;
            probe_loss(g, z)
        })
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}
