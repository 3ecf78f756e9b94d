use std::collections::{BTreeMap, BTreeSet};

use physio_fusion::eval::suite::task_folds;
use physio_fusion::eval::{run_ablation_suite, split_validation, write_report, SuiteConfig};
use physio_fusion::features::{extract_features, ExtractConfig, FeatureTable, RowMeta};
use physio_fusion::fusion::{build_examples, Ablation, FusionConfig, Task};
use physio_fusion::io::synth::{BehaviorEffect, EmbeddingSpec, MeanSd};
use physio_fusion::io::{generate_synthetic, load_embedding_index, Embedding, SynthSpec};
use physio_fusion::types::{Category, Experiment, SexismLabels, SexismLevel, Task2};

fn meta(meme: &str, labels: SexismLabels) -> RowMeta {
    RowMeta {
        trial_id: format!("{meme}_t"),
        meme_id: meme.into(),
        subject_id: "s1".into(),
        experiment: Experiment::EegHr,
        labels,
    }
}

fn dataset(seed: u64) -> (tempfile::TempDir, FeatureTable, BTreeMap<String, Embedding>) {
    let quick = BehaviorEffect {
        rt_s: MeanSd { mean: 2.5, sd: 0.3 },
        fixation_count: MeanSd { mean: 8.0, sd: 2.0 },
        blink_duration_ms: MeanSd { mean: 250.0, sd: 40.0 },
    };
    let spec = SynthSpec {
        n_memes: 30,
        n_subjects: 6,
        behavior_effect: SexismLevel::ALL.into_iter().map(|l| (l, quick)).collect(),
        embedding: Some(EmbeddingSpec { dim: 8, n_tokens: 4, vocab_size: 40, text_signal: 0.5 }),
        seed,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let table = extract_features(&m, &ExtractConfig::default()).unwrap();
    let (emb, _) = load_embedding_index(&dir.path().join("emb/index.ndjson")).unwrap();
    (dir, table, emb)
}

fn small_suite() -> SuiteConfig {
    SuiteConfig {
        k: 3,
        n_resamples: 100,
        tasks: vec![Task::T1, Task::T3],
        ablations: vec![Ablation::Baseline, Ablation::EegEtHr],
        fusion: FusionConfig { model_dim: 8, heads: 2, mlp_hidden: 4, phase1_epochs: 1, phase2_epochs: 1, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn small_strata_are_pooled_and_tiny_pools_join_the_largest() {
    let mut metas = Vec::new();
    for i in 0..9 {
        metas.push(meta(&format!("n{i}"), SexismLabels::non_sexist()));
    }
    for i in 0..6 {
        metas.push(meta(&format!("s{i}"), SexismLabels::sexist(Some(Task2::Direct), vec![])));
    }
    let table = |metas: &[RowMeta]| FeatureTable { columns: vec![], meta: metas.to_vec(), values: vec![vec![]; metas.len()] };
    let plan = task_folds(&table(&metas), Task::T1, 3, 1).unwrap();
    assert_eq!(plan.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 5]);
    for f in &plan.folds {
        assert_eq!(f.iter().filter(|m| m.starts_with('s')).count(), 2);
    }

    // T3: categories with fewer than k memes pool together
    let mut t3 = Vec::new();
    for (i, c) in [Category::IdeologicalInequality, Category::IdeologicalInequality, Category::IdeologicalInequality, Category::StereotypingDominance, Category::Objectification, Category::MisogynyNonSexualViolence]
        .into_iter()
        .enumerate()
    {
        t3.push(meta(&format!("c{i}"), SexismLabels::sexist(Some(Task2::Direct), vec![c])));
    }
    let plan = task_folds(&table(&t3), Task::T3, 3, 1).unwrap();
    assert!(plan.folds.iter().all(|f| f.len() == 2));
    let ideo: Vec<usize> = (0..3).map(|i| plan.fold_of(&format!("c{i}")).unwrap()).collect();
    assert_eq!(ideo.iter().collect::<BTreeSet<_>>().len(), 3);

    // a lone leftover meme joins the largest stratum instead of failing
    let mut lone = t3.clone();
    lone.truncate(3);
    for i in 0..3 {
        lone.push(meta(&format!("d{i}"), SexismLabels::sexist(Some(Task2::Direct), vec![Category::StereotypingDominance])));
    }
    lone.push(meta("x", SexismLabels::sexist(Some(Task2::Direct), vec![Category::Objectification])));
    let plan = task_folds(&table(&lone), Task::T3, 3, 1).unwrap();
    assert_eq!(plan.folds.iter().map(Vec::len).sum::<usize>(), 7);
    assert!(plan.fold_of("x").is_some());
}

#[test]
fn validation_split_is_stratified_and_keeps_training_examples() {
    let (_dir, table, emb) = dataset(3);
    let exs = build_examples(&table, &emb).unwrap();
    let (tr, va) = split_validation(&exs, Task::T1, 0.25, 9, "val");
    assert_eq!(tr.len() + va.len(), exs.len());
    let pos = |v: &[physio_fusion::fusion::MemeExample]| v.iter().filter(|e| Task::T1.target(&e.labels) == Some(vec![1.0])).count();
    assert!(pos(&va) >= 1 && pos(&tr) >= 1);
    assert!(va.len() * 4 <= exs.len() + 4);
    let again = split_validation(&exs, Task::T1, 0.25, 9, "val");
    assert_eq!(va.iter().map(|e| &e.meme_id).collect::<Vec<_>>(), again.1.iter().map(|e| &e.meme_id).collect::<Vec<_>>());
    // out-of-scope memes (non-sexist for T2) stay on the training side
    let (_, va2) = split_validation(&exs, Task::T2, 0.5, 9, "val");
    assert!(va2.iter().all(|e| Task::T2.target(&e.labels).is_some()));
}

#[test]
fn ablation_suite_covers_every_meme_once_per_configuration() {
    let (_dir, table, emb) = dataset(5);
    let config = small_suite();
    let report = run_ablation_suite(&table, &emb, &config, 4).unwrap();
    assert_eq!(report.results.len(), 4);
    for task in [Task::T1, Task::T3] {
        let plan = &report.fold_plans[&task];
        let in_scope: BTreeSet<&str> =
            table.meta.iter().filter(|m| task.target(&m.labels).is_some()).map(|m| m.meme_id.as_str()).collect();
        let planned: BTreeSet<&str> = plan.folds.iter().flatten().map(String::as_str).collect();
        assert_eq!(planned, in_scope);
        for ablation in [Ablation::Baseline, Ablation::EegEtHr] {
            let preds: Vec<_> = report.predictions.iter().filter(|p| p.task == task && p.ablation == ablation).collect();
            let memes: BTreeSet<&str> = preds.iter().map(|p| p.meme_id.as_str()).collect();
            assert_eq!(memes.len(), preds.len());
            assert_eq!(memes, in_scope);
            for p in &preds {
                assert_eq!(plan.fold_of(&p.meme_id), Some(p.fold));
                assert_eq!(p.probs.len(), task.n_outputs());
                assert!(p.probs.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let r = report.result(task, ablation).unwrap();
            assert_eq!(r.folds.len(), 3);
            assert!(r.auc.ci.0 <= r.auc.ci.1);
        }
    }
    assert_eq!(report, run_ablation_suite(&table, &emb, &config, 4).unwrap());
}

#[test]
fn report_files_are_written() {
    let (_dir, table, emb) = dataset(6);
    let config = SuiteConfig { tasks: vec![Task::T1], ..small_suite() };
    let report = run_ablation_suite(&table, &emb, &config, 1).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_report(&report, out.path()).unwrap();
    let summary = std::fs::read_to_string(out.path().join("auc_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "model,T1_auc_mean,T1_auc_sd,T1_auc_ci_lo,T1_auc_ci_hi");
    assert!(lines[1].starts_with("Baseline (content only),"));
    assert!(lines[2].starts_with("+ EEG + ET/HR,"));
    let preds = std::fs::read_to_string(out.path().join("predictions.ndjson")).unwrap();
    assert_eq!(preds.lines().count(), report.predictions.len());
    let svg = std::fs::read_to_string(out.path().join("auc_chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 2);
}
