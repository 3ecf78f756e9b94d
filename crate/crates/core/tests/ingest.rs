use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use physio_fusion::features::{extract_features, ExtractConfig, FeatureTable};
use physio_fusion::io::synth::{EmbeddingSpec, MeanSd};
use physio_fusion::io::{
    generate_synthetic, load_manifest, read_eeg_recording, read_indexed_embedding, read_ndjson, write_eeg_recording,
    EmbeddingIndexEntry, IoError, SynthSpec,
};
use physio_fusion::types::{EegRecording, Experiment, SexismLevel, ValidationError};

fn write(path: &Path, text: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

fn line(id: &str, onset: f64, response: f64, eeg: Option<&str>) -> String {
    let paths = match eeg {
        Some(p) => format!(r#"{{"eeg":"{p}"}}"#),
        None => "{}".into(),
    };
    format!(
        r#"{{"trial_id":"{id}","meme_id":"m1","subject_id":"s1","session_id":"1","experiment":"EEG_HR","stimulus_onset_ms":{onset},"response_ms":{response},"labels":{{"task1":"non_sexist"}},"paths":{paths}}}"#
    )
}

fn small_rec() -> EegRecording {
    EegRecording { sample_rate_hz: 250.0, data: vec![vec![0.5; 1250]; 16] }
}

#[test]
fn manifest_loads_valid_lines() {
    let dir = tempfile::tempdir().unwrap();
    write_eeg_recording(&dir.path().join("eeg/a.phys"), &small_rec()).unwrap();
    let text = [line("a", 2000.0, 3000.0, Some("eeg/a.phys")), line("b", 0.0, 5.0, None), line("c", 1.0, 2.0, None)].join("\n");
    write(&dir.path().join("manifest.ndjson"), &text);
    let m = load_manifest(&dir.path().join("manifest.ndjson")).unwrap();
    assert_eq!(m.trials().len(), 3);
    assert_eq!(m.eeg(&m.entries[0]).unwrap().unwrap(), small_rec());
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.ndjson");

    write(&path, &[line("a", 0.0, 5.0, None), line("bad", 100.0, 100.0, None)].join("\n"));
    match load_manifest(&path) {
        Err(IoError::Validation(ValidationError::Trial { trial_id, .. })) => assert_eq!(trial_id, "bad"),
        other => panic!("{other:?}"),
    }

    write(&path, &line("a", 0.0, 5.0, Some("eeg/absent.phys")));
    assert!(matches!(load_manifest(&path), Err(IoError::MissingFile(p)) if p.ends_with("eeg/absent.phys")));

    write(&path, &[line("a", 0.0, 5.0, None), "{not json".to_string()].join("\n"));
    assert!(matches!(load_manifest(&path), Err(IoError::Parse { line: 2, .. })));

    write(&path, &[line("a", 0.0, 5.0, None), line("a", 0.0, 6.0, None)].join("\n"));
    assert!(matches!(load_manifest(&path), Err(IoError::Validation(_))));
}

#[test]
fn eeg_file_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.phys");
    let b = dir.path().join("b.phys");
    let rec = EegRecording {
        sample_rate_hz: 250.0,
        data: (0..16).map(|c| (0..1250).map(|i| ((c * 31 + i * 7) % 97) as f32 / 7.0 - 5.0).collect()).collect(),
    };
    write_eeg_recording(&a, &rec).unwrap();
    let back = read_eeg_recording(&a).unwrap();
    assert_eq!(back.n_channels(), 16);
    assert_eq!(back.n_samples(), 1250);
    write_eeg_recording(&b, &back).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bytes = fs::read(&a).unwrap();
    fs::write(&b, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_eeg_recording(&b), Err(IoError::HeaderMismatch { .. })));
}

fn quick_spec(seed: u64) -> SynthSpec {
    let quick = |m| physio_fusion::io::synth::BehaviorEffect {
        rt_s: MeanSd { mean: m, sd: 0.3 },
        fixation_count: MeanSd { mean: 8.0, sd: 2.0 },
        blink_duration_ms: MeanSd { mean: 250.0, sd: 40.0 },
    };
    SynthSpec {
        n_memes: 8,
        behavior_effect: BTreeMap::from([
            (SexismLevel::NonSexist, quick(2.5)),
            (SexismLevel::Direct, quick(2.8)),
            (SexismLevel::Judgmental, quick(3.1)),
        ]),
        pupil_rate_hz: 2.0,
        embedding: Some(EmbeddingSpec { dim: 8, n_tokens: 5, vocab_size: 50, text_signal: 0.0 }),
        seed,
        ..Default::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&quick_spec(7), a.path()).unwrap();
    generate_synthetic(&quick_spec(7), b.path()).unwrap();
    generate_synthetic(&quick_spec(8), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert!(ta.len() > 40);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn synthetic_dataset_loads_and_extracts() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&quick_spec(3), dir.path()).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.ndjson")).unwrap();
    assert_eq!(loaded.entries, m.entries);
    assert_eq!(m.entries.len(), 8 * 2 * 2);
    let mut per_meme: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &m.entries {
        *per_meme.entry(&e.trial.meme_id).or_default() += 1;
    }
    assert!(per_meme.values().all(|&n| n == 4));

    let index: Vec<EmbeddingIndexEntry> = read_ndjson(&dir.path().join("emb/index.ndjson")).unwrap();
    assert_eq!(index.len(), 8);
    for entry in &index {
        let e = read_indexed_embedding(&dir.path().join("emb"), entry).unwrap();
        assert_eq!(e.n_tokens(), entry.tokens.len());
        let mut wrong = entry.clone();
        wrong.dim += 1;
        assert!(matches!(read_indexed_embedding(&dir.path().join("emb"), &wrong), Err(IoError::HeaderMismatch { .. })));
    }

    let cfg = ExtractConfig::default();
    let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| extract_features(&loaded, &cfg)).unwrap();
    let par = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| extract_features(&loaded, &cfg)).unwrap();
    assert_eq!(seq.columns.len(), 169);
    let bits = |t: &FeatureTable| t.values.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&seq), bits(&par));

    let eeg_col = seq.column_index("eeg_C4_alpha_power").unwrap();
    let fix_col = seq.column_index("et_fixation_count").unwrap();
    for (meta, row) in seq.meta.iter().zip(&seq.values) {
        match meta.experiment {
            Experiment::EegHr => assert!(row[eeg_col] > 0.0 && row[fix_col].is_nan()),
            Experiment::EtHr => assert!(row[eeg_col].is_nan() && row[fix_col] >= 0.0),
        }
    }

    let csv = dir.path().join("features.csv");
    seq.write_csv(&csv).unwrap();
    let back = FeatureTable::read_csv(&csv).unwrap();
    assert_eq!(back.meta, seq.meta);
    assert_eq!(back.columns, seq.columns);
    assert_eq!(bits(&back), bits(&seq));
}
