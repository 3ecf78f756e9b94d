use physio_fusion::autodiff::gradcheck::max_relative_error;
use physio_fusion::autodiff::{Graph, ParamStore, Tensor};
use physio_fusion::fusion::train::{phase_lrs, train};
use physio_fusion::fusion::{
    parameter_count, Ablation, FusionConfig, FusionDims, FusionError, FusionModel, InputScaling, MemeExample, Precision, Task,
};
use physio_fusion::rng::{stream, Rng};
use physio_fusion::types::{Category, SexismLabels, Task2};
use rand::Rng as _;
use rand_distr::StandardNormal;

fn n(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn example(i: usize, rng: &mut Rng, dims: FusionDims, informative: bool) -> MemeExample {
    let y = i % 2 == 0;
    let labels = if y {
        SexismLabels::sexist(Some(if i % 4 == 0 { Task2::Direct } else { Task2::Judgmental }), vec![Category::ALL[i % 5]])
    } else {
        SexismLabels::non_sexist()
    };
    let signal = |j: usize, rng: &mut Rng| if informative && j == 0 { if y { 1.0 } else { -1.0 } } else { n(rng) };
    MemeExample {
        meme_id: format!("m{i:04}"),
        cls: (0..dims.d_text).map(|_| n(rng) * 0.2).collect(),
        tokens: (0..3 + i % 4).map(|_| (0..dims.d_text).map(|_| n(rng) * 0.2).collect()).collect(),
        eeg: (0..1 + i % 3).map(|_| (0..dims.f_eeg).map(|j| signal(j, rng)).collect()).collect(),
        ethr: (0..i % 2 + 1).map(|_| (0..dims.f_ethr).map(|_| n(rng)).collect()).collect(),
        labels,
    }
}

fn small_config(ablation: Ablation, task: Task) -> FusionConfig {
    FusionConfig { heads: 2, model_dim: 8, mlp_hidden: 6, dropout: 0.0, ablation, task, ..Default::default() }
}

const DIMS: FusionDims = FusionDims { d_text: 5, f_eeg: 4, f_ethr: 3 };

fn randomized(model: &FusionModel, seed: u64) -> FusionModel {
    let mut m = model.clone();
    let mut rng = stream(seed, "perturb");
    for p in &mut m.params.params {
        for v in &mut p.value.data {
            *v += 0.3 * n(&mut rng);
        }
    }
    m
}

#[test]
fn parameter_count_matches_formula() {
    for ab in Ablation::ALL {
        for task in Task::ALL {
            for (d, h, heads) in [(8, 6, 2), (16, 4, 4)] {
                let cfg = FusionConfig { model_dim: d, mlp_hidden: h, heads, ablation: ab, task, ..Default::default() };
                let m = FusionModel::new(cfg.clone(), DIMS, InputScaling::identity(4, 3), 1).unwrap();
                assert_eq!(m.params.n_values(), parameter_count(&cfg, &DIMS));
                let (dt, f1, f2, k) = (5, 4, 3, task.n_outputs());
                let branch = |f: usize| f * d + d + 4 * d + 4 * (d * d + d) + d + d * h;
                let expected = dt * d + d + d * d + d + d * h + h + h * k + k
                    + if ab.uses_eeg() { branch(f1) } else { 0 }
                    + if ab.uses_ethr() { branch(f2) } else { 0 };
                assert_eq!(m.params.n_values(), expected);
            }
        }
    }
    let m = FusionModel::new(small_config(Ablation::Baseline, Task::T3), DIMS, InputScaling::identity(4, 3), 1).unwrap();
    assert_eq!(m.params.get("head.out.b").unwrap().shape, vec![5]);
    assert!(m.params.params.iter().all(|p| p.name.starts_with("adapter.") || p.name.starts_with("head.cls") || p.name.starts_with("head.b") || p.name.starts_with("head.out")));
}

#[test]
fn invalid_config_is_rejected() {
    let bad = FusionConfig { model_dim: 10, heads: 4, ..Default::default() };
    assert!(matches!(FusionModel::new(bad, DIMS, InputScaling::identity(4, 3), 0), Err(FusionError::Config(_))));
    let bad = FusionConfig { phase1_lr: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_initialized_branches_reproduce_content_only_logits() {
    let mut rng = stream(2, "ex");
    let exs: Vec<MemeExample> = (0..4).map(|i| example(i, &mut rng, DIMS, true)).collect();
    let refs: Vec<&MemeExample> = exs.iter().collect();
    let base = FusionModel::new(small_config(Ablation::Baseline, Task::T1), DIMS, InputScaling::identity(4, 3), 9).unwrap();
    let full = FusionModel::new(small_config(Ablation::EegEtHr, Task::T1), DIMS, InputScaling::identity(4, 3), 9).unwrap();
    for p in &base.params.params {
        assert_eq!(full.params.get(&p.name), Some(&p.value), "{}", p.name);
    }
    assert_eq!(base.forward(&refs).unwrap().logits, full.forward(&refs).unwrap().logits);
}

#[test]
fn subject_row_order_does_not_matter() {
    let mut rng = stream(3, "ex");
    let ex = example(2, &mut rng, DIMS, false);
    let mut perm = ex.clone();
    perm.eeg.reverse();
    perm.ethr.reverse();
    let m = FusionModel::new(small_config(Ablation::EegEtHr, Task::T1), DIMS, InputScaling::identity(4, 3), 1).unwrap();
    let m = randomized(&m, 4);
    let a = m.forward(&[&ex]).unwrap().logits.data[0];
    let b = m.forward(&[&perm]).unwrap().logits.data[0];
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

fn batch_loss(model: &FusionModel, exs: &[&MemeExample], pw: &[f64]) -> impl Fn(&mut Graph, &ParamStore) -> Result<physio_fusion::autodiff::Var, physio_fusion::autodiff::AutodiffError> {
    let batch = model.batch(exs).unwrap();
    let model = model.clone();
    let pw = pw.to_vec();
    move |g, params| {
        let vars = model.forward_graph(g, params, &batch, None).map_err(|e| match e {
            FusionError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        g.weighted_bce(vars.logits, &batch.targets, &pw)
    }
}

#[test]
fn full_model_gradient_check() {
    let mut rng = stream(5, "ex");
    let exs: Vec<MemeExample> = (0..4).map(|i| example(i, &mut rng, DIMS, false)).collect();
    for task in [Task::T1, Task::T3] {
        let refs: Vec<&MemeExample> = exs.iter().filter(|e| task.target(&e.labels).is_some()).take(2).collect();
        assert_eq!(refs.len(), 2);
        let m = FusionModel::new(small_config(Ablation::EegEtHr, task), DIMS, InputScaling::identity(4, 3), 6).unwrap();
        let m = randomized(&m, 7);
        let pw = vec![1.5; task.n_outputs()];
        let err = max_relative_error(&m.params, 1e-4, batch_loss(&m, &refs, &pw)).unwrap();
        assert!(err < 1e-6, "{task:?}: {err}");
    }
}

#[test]
fn duplicated_positives_with_halved_weight_keep_the_gradient() {
    let mut rng = stream(8, "ex");
    let exs: Vec<MemeExample> = (0..6).map(|i| example(i, &mut rng, DIMS, false)).collect();
    let dup: Vec<MemeExample> = exs.iter().flat_map(|e| if e.labels.task1 == physio_fusion::types::Task1::Sexist { vec![e.clone(), e.clone()] } else { vec![e.clone()] }).collect();
    let m = randomized(&FusionModel::new(small_config(Ablation::Eeg, Task::T1), DIMS, InputScaling::identity(4, 3), 1).unwrap(), 2);
    // summed (not averaged) loss: total weight is the same in both datasets
    let grad = |exs: &[MemeExample], pw: f64| {
        let refs: Vec<&MemeExample> = exs.iter().collect();
        let batch = m.batch(&refs).unwrap();
        let mut g = Graph::new();
        let vars = m.forward_graph(&mut g, &m.params, &batch, None).unwrap();
        let l = g.weighted_bce(vars.logits, &batch.targets, &[pw]).unwrap();
        let s = g.scale(l, exs.len() as f64).unwrap();
        g.backward(s).for_params(m.params.params.len())
    };
    let (a, b) = (grad(&exs, 2.0), grad(&dup, 1.0));
    for (ga, gb) in a.iter().zip(&b) {
        if let (Some(ga), Some(gb)) = (ga, gb) {
            for (x, y) in ga.iter().zip(gb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn phase_one_freezes_the_adapter_and_groups_get_their_rates() {
    let mut rng = stream(9, "ex");
    let exs: Vec<MemeExample> = (0..12).map(|i| example(i, &mut rng, DIMS, true)).collect();
    let cfg = FusionConfig { phase1_epochs: 2, phase2_epochs: 0, ..small_config(Ablation::EegEtHr, Task::T1) };
    let out = train(&cfg, &exs, &[], 3).unwrap();
    let init = FusionModel::new(cfg.clone(), out.model.dims, out.model.scaling.clone(), 3).unwrap();
    for (a, b) in init.params.params.iter().zip(&out.model.params.params) {
        let same = a.value.data.iter().zip(&b.value.data).all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, a.name.starts_with("adapter."), "{}", a.name);
    }
    let lrs1 = phase_lrs(&init, 1);
    let lrs2 = phase_lrs(&init, 2);
    for (p, (l1, l2)) in init.params.params.iter().zip(lrs1.iter().zip(&lrs2)) {
        let (e1, e2) = match p.name.as_str() {
            n if n.starts_with("adapter.lower.") => (None, Some(2e-6)),
            n if n.starts_with("adapter.upper.") => (None, Some(1e-5)),
            _ => (Some(5e-5), Some(5e-5)),
        };
        assert_eq!((*l1, *l2), (e1, e2), "{}", p.name);
    }
}

#[test]
fn training_is_seed_deterministic_and_logs_every_epoch() {
    let mut rng = stream(10, "ex");
    let exs: Vec<MemeExample> = (0..16).map(|i| example(i, &mut rng, DIMS, true)).collect();
    let cfg = FusionConfig { phase1_epochs: 1, phase2_epochs: 2, dropout: 0.1, ..small_config(Ablation::Eeg, Task::T1) };
    let a = train(&cfg, &exs[..12], &exs[12..], 4).unwrap();
    let b = train(&cfg, &exs[..12], &exs[12..], 4).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 6);
    assert_eq!(a.log.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 1, 2, 2, 2, 2]);
    let refs: Vec<&MemeExample> = exs.iter().collect();
    assert_eq!(a.model.predict_proba(&refs).unwrap(), a.model.predict_proba(&refs).unwrap());
}

#[test]
fn diverging_training_reports_the_batch() {
    let mut rng = stream(11, "ex");
    let exs: Vec<MemeExample> = (0..8).map(|i| example(i, &mut rng, DIMS, true)).collect();
    let cfg = FusionConfig { phase1_lr: 1e300, phase1_epochs: 3, ..small_config(Ablation::Eeg, Task::T1) };
    assert!(matches!(train(&cfg, &exs, &[], 1), Err(FusionError::DivergedLoss { .. })));
}

#[test]
fn attention_export() {
    let mut rng = stream(12, "ex");
    let mut ex = example(3, &mut rng, DIMS, false);
    let m = randomized(&FusionModel::new(small_config(Ablation::EegEtHr, Task::T1), DIMS, InputScaling::identity(4, 3), 1).unwrap(), 5);
    let tokens: Vec<String> = (0..ex.tokens.len()).map(|i| format!("tok{i}")).collect();
    let rec = m.export_attention(&ex, &tokens, 2).unwrap();
    assert_eq!(rec.branches.len(), 2);
    for b in &rec.branches {
        for head in &b.weights {
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for (r, top) in b.top_tokens.iter().enumerate() {
            let avg: Vec<f64> = (0..tokens.len()).map(|j| b.weights.iter().map(|h| h[r][j]).sum::<f64>() / b.weights.len() as f64).collect();
            let argmax = (0..avg.len()).max_by(|&x, &y| avg[x].total_cmp(&avg[y]).then(y.cmp(&x))).unwrap();
            assert_eq!(top[0].index, argmax);
            assert_eq!(top.len(), 2);
        }
    }
    assert!(matches!(m.export_attention(&ex, &tokens[1..], 1), Err(FusionError::TokenCountMismatch { .. })));
    ex.tokens.truncate(1);
    let rec = m.export_attention(&ex, &tokens[..1], 3).unwrap();
    assert!(rec.branches.iter().flat_map(|b| b.weights.iter().flatten().flatten()).all(|&w| w == 1.0));
}

#[test]
fn checkpoint_reload_is_bitwise_at_f32() {
    let mut rng = stream(13, "ex");
    let exs: Vec<MemeExample> = (0..6).map(|i| example(i, &mut rng, DIMS, true)).collect();
    let refs: Vec<&MemeExample> = exs.iter().collect();
    let cfg = FusionConfig { precision: Precision::F32, phase1_epochs: 1, phase2_epochs: 1, ..small_config(Ablation::EegEtHr, Task::T2) };
    let out = train(&cfg, &exs, &[], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    out.model.save(&stem).unwrap();
    let back = FusionModel::load(&stem).unwrap();
    let scoped: Vec<&MemeExample> = refs.iter().copied().filter(|e| Task::T2.target(&e.labels).is_some()).collect();
    let a = out.model.forward(&scoped).unwrap().logits;
    let b = back.forward(&scoped).unwrap().logits;
    assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn informative_eeg_is_learned_and_noise_text_is_not() {
    let dims = FusionDims { d_text: 32, f_eeg: 144, f_ethr: 3 };
    let mut rng = stream(14, "sep");
    let exs: Vec<MemeExample> = (0..260).map(|i| example(i, &mut rng, dims, true)).collect();
    let (tr, va) = exs.split_at(160);
    let auc = |ab| {
        let cfg = FusionConfig { ablation: ab, ..Default::default() };
        assert!(cfg.residual);
        let out = train(&cfg, tr, va, 1).unwrap();
        out.log.iter().filter(|r| r.split == "val" && r.epoch == out.best_epoch).map(|r| r.auc.unwrap()).next().unwrap()
    };
    let physio = auc(Ablation::Eeg);
    let content = auc(Ablation::Baseline);
    assert!(physio >= 0.95, "{physio}");
    assert!((0.4..=0.6).contains(&content), "{content}");
}

#[test]
fn tensor_shapes_are_checked() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}
