//! `physio-fusion` command line: synthetic data, feature extraction,
//! harmonization, statistics, fusion training, ablation evaluation and
//! attention export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error. Logs go to
//! stderr; `--json` prints a one-line machine-readable summary to stdout.
//! Every run writes its resolved configuration as JSON next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use physio_fusion::analysis::{anova_by, contrast_by, Grouping};
use physio_fusion::eval::{run_ablation_suite, split_validation, write_report, SuiteConfig};
use physio_fusion::features::{extract_features, ExtractConfig, FeatureTable};
use physio_fusion::fusion::{build_examples, train::train, Ablation, FusionConfig, FusionModel, Precision, Task};
use physio_fusion::harmonize::{self, HarmonizeConfig, HarmonizeScope};
use physio_fusion::io::{generate_synthetic, load_embedding_index, load_manifest, write_ndjson, SynthSpec};
use physio_fusion::stats::{topomap::emit_topomap, write_anova_csv, write_contrast_csv};
use physio_fusion::types::ChannelLayout;

#[derive(Debug, Parser)]
#[command(name = "physio-fusion", version, about = "Physiological-signal pipeline for meme sexism detection")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GlobalArgs {
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for model parameters.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print a JSON summary to stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScopeArg {
    EegOnly,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, recordings, embeddings).
    GenSynth(GenSynthArgs),
    /// Extract EEG and behavioral features from a manifest into a CSV.
    Extract(ExtractArgs),
    /// Fit and apply Box-Cox, ComBat (batch = subject), winsorization and robust z.
    Harmonize(HarmonizeArgs),
    /// One-way ANOVA tables and per-channel band-power contrasts.
    Analyze(AnalyzeArgs),
    /// Train one fusion model.
    Train(TrainArgs),
    /// Cross-validated ablation suite with bootstrap intervals.
    Eval(EvalArgs),
    /// Export cross-attention weights of a trained model.
    ExportAttn(ExportAttnArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenSynthArgs {
    /// Synthetic dataset specification (JSON); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    /// Trial manifest (NDJSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Output feature CSV.
    #[arg(long)]
    out: PathBuf,
    /// Extraction settings (JSON: filter, hr_unit).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HarmonizeArgs {
    /// Input feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Output feature CSV.
    #[arg(long)]
    out: PathBuf,
    /// Columns to harmonize.
    #[arg(long, value_enum, default_value = "eeg-only")]
    scope: ScopeArg,
    /// Lower winsorization percentile.
    #[arg(long, default_value_t = 0.01)]
    winsor_lo: f64,
    /// Upper winsorization percentile.
    #[arg(long, default_value_t = 0.99)]
    winsor_hi: f64,
}

#[derive(Debug, Args, Serialize)]
struct AnalyzeArgs {
    /// Feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Grouping: task1, task2 or category:<name>.
    #[arg(long)]
    by: String,
    /// Feature columns to test (repeatable).
    #[arg(long = "metric", required = true)]
    metrics: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    /// Also compute per-channel band-power contrasts and a topomap.
    #[arg(long)]
    contrast: bool,
    /// Judge contrast significance on Benjamini-Hochberg adjusted p-values.
    #[arg(long)]
    fdr: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Embedding index (NDJSON).
    #[arg(long)]
    embeddings: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    /// Model and training settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: T1, T2 or T3.
    #[arg(long)]
    task: Option<Task>,
    /// Ablation: baseline, eeg or eeg_et_hr.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Share of memes held out for checkpoint selection.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Feature CSV (unharmonized; harmonization is refit on every training fold).
    #[arg(long)]
    features: PathBuf,
    /// Embedding index (NDJSON).
    #[arg(long)]
    embeddings: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Suite settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Bootstrap resamples.
    #[arg(long)]
    resamples: Option<usize>,
    /// Tasks to run (repeatable).
    #[arg(long = "task")]
    tasks: Vec<Task>,
    /// Ablations to run (repeatable).
    #[arg(long = "ablation")]
    ablations: Vec<Ablation>,
}

#[derive(Debug, Args, Serialize)]
struct ExportAttnArgs {
    /// Checkpoint stem (the path without .json/.bin).
    #[arg(long)]
    model: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Embedding index (NDJSON).
    #[arg(long)]
    embeddings: PathBuf,
    /// Output NDJSON.
    #[arg(long)]
    out: PathBuf,
    /// Tokens listed per branch, highest weight first.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Restrict to these memes (repeatable).
    #[arg(long = "meme")]
    memes: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

type CliResult<T> = Result<T, CliError>;

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(data)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `feats.csv` -> `feats.config.json`.
fn sidecar(file: &Path) -> PathBuf {
    file.with_extension("config.json")
}

fn resolved(command: &str, global: &GlobalArgs, seed: u64, args: &impl Serialize, extra: Value) -> Value {
    json!({
        "command": command,
        "seed": seed,
        "precision": global.precision,
        "threads": global.threads,
        "args": args,
        "resolved": extra,
    })
}

fn load_table(path: &Path) -> CliResult<FeatureTable> {
    FeatureTable::read_csv(path).map_err(data)
}

fn gen_synth(global: &GlobalArgs, a: &GenSynthArgs) -> CliResult<Value> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(data)?;
    log::info!("generating {} memes into {}", spec.n_memes, a.out.display());
    let manifest = generate_synthetic(&spec, &a.out).map_err(data)?;
    let spec_json = serde_json::to_value(&spec).map_err(data)?;
    write_json(&a.out.join("config.json"), &resolved("gen-synth", global, spec.seed, a, spec_json))?;
    Ok(json!({ "trials": manifest.entries.len(), "manifest": a.out.join("manifest.ndjson") }))
}

fn extract(global: &GlobalArgs, a: &ExtractArgs) -> CliResult<Value> {
    let config: ExtractConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExtractConfig::default(),
    };
    let manifest = load_manifest(&a.manifest).map_err(data)?;
    log::info!("extracting {} trials", manifest.entries.len());
    let table = extract_features(&manifest, &config).map_err(data)?;
    table.write_csv(&a.out).map_err(data)?;
    let cfg = serde_json::to_value(config).map_err(data)?;
    write_json(&sidecar(&a.out), &resolved("extract", global, global.seed.unwrap_or(0), a, cfg))?;
    Ok(json!({ "rows": table.values.len(), "columns": table.columns.len(), "out": a.out }))
}

fn harmonize_cmd(global: &GlobalArgs, a: &HarmonizeArgs) -> CliResult<Value> {
    let table = load_table(&a.features)?;
    let config = HarmonizeConfig {
        scope: match a.scope {
            ScopeArg::EegOnly => HarmonizeScope::EegOnly,
            ScopeArg::All => HarmonizeScope::All,
        },
        winsor: (a.winsor_lo, a.winsor_hi),
        unseen_batch_identity: false,
    };
    let batches: Vec<String> = table.meta.iter().map(|m| m.subject_id.clone()).collect();
    let params = harmonize::fit(&table.columns, &table.values, &batches, config).map_err(data)?;
    let values = params.apply(&table.values, &batches).map_err(data)?;
    let out = FeatureTable { columns: params.output_columns(), meta: table.meta, values };
    out.write_csv(&a.out).map_err(data)?;
    let params_path = a.out.with_extension("params.json");
    write_json(&params_path, &serde_json::to_value(&params).map_err(data)?)?;
    let cfg = serde_json::to_value(config).map_err(data)?;
    write_json(&sidecar(&a.out), &resolved("harmonize", global, global.seed.unwrap_or(0), a, cfg))?;
    if !params.dropped.is_empty() {
        log::warn!("dropped columns: {}", params.dropped.join(", "));
    }
    Ok(json!({
        "rows": out.values.len(),
        "harmonized": params.columns.len(),
        "dropped": params.dropped,
        "out": a.out,
        "params": params_path,
    }))
}

fn analyze(global: &GlobalArgs, a: &AnalyzeArgs) -> CliResult<Value> {
    let by: Grouping = a.by.parse().map_err(|e| CliError::Usage(format!("--by: {e}")))?;
    let table = load_table(&a.features)?;
    let mut results = Vec::new();
    for metric in &a.metrics {
        results.push(anova_by(&table, by, metric).map_err(|e| CliError::Data(format!("{metric}: {e}")))?);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let anova_path = a.out.join("anova.csv");
    let file = physio_fusion::io::create(&anova_path).map_err(data)?;
    write_anova_csv(file, &results).map_err(data)?;
    let mut summary = json!({
        "anova": results.iter().map(|r| json!({
            "metric": r.metric, "F": r.f, "df_between": r.df_between, "df_within": r.df_within, "p": r.p,
        })).collect::<Vec<_>>(),
    });
    if a.contrast {
        let layout = ChannelLayout::standard_16();
        let contrasts = contrast_by(&table, by, &layout, a.fdr).map_err(data)?;
        let file = physio_fusion::io::create(&a.out.join("contrasts.csv")).map_err(data)?;
        write_contrast_csv(file, &contrasts).map_err(data)?;
        let (la, lb) = by.contrast_labels();
        std::fs::write(a.out.join("topomap.svg"), emit_topomap(&contrasts, &layout, &la, &lb))
            .map_err(|e| CliError::Data(format!("{}: {e}", a.out.join("topomap.svg").display())))?;
        summary["significant_cells"] = json!(contrasts.iter().filter(|c| c.significant).count());
    }
    write_json(&a.out.join("config.json"), &resolved("analyze", global, global.seed.unwrap_or(0), a, json!({ "grouping": by.to_string() })))?;
    Ok(summary)
}

fn fusion_config(global: &GlobalArgs, path: Option<&Path>) -> CliResult<FusionConfig> {
    let mut c: FusionConfig = match path {
        Some(p) => read_json(p)?,
        None => FusionConfig::default(),
    };
    if let Some(p) = global.precision {
        c.precision = p.into();
    }
    Ok(c)
}

fn train_cmd(global: &GlobalArgs, a: &TrainArgs) -> CliResult<Value> {
    let seed = global.seed.unwrap_or(0);
    let mut config = fusion_config(global, a.config.as_deref())?;
    if let Some(t) = a.task {
        config.task = t;
    }
    if let Some(ab) = a.ablation {
        config.ablation = ab;
    }
    config.validate().map_err(data)?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(CliError::Usage("--val-fraction must lie in [0, 1)".into()));
    }
    let table = load_table(&a.features)?;
    let (embeddings, _) = load_embedding_index(&a.embeddings).map_err(data)?;
    let examples = build_examples(&table, &embeddings).map_err(data)?;
    let (tr, va) = split_validation(&examples, config.task, a.val_fraction, seed, &format!("val:{}", config.task.as_str()));
    log::info!("training {} / {} on {} memes ({} validation)", config.task.as_str(), config.ablation.as_str(), tr.len(), va.len());
    let outcome = train(&config, &tr, &va, seed).map_err(data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let stem = a.out.join("model");
    outcome.model.save(&stem).map_err(data)?;
    write_ndjson(&a.out.join("train_log.ndjson"), &outcome.log).map_err(data)?;
    let cfg = serde_json::to_value(&config).map_err(data)?;
    write_json(&a.out.join("config.json"), &resolved("train", global, seed, a, cfg))?;
    let best = outcome.log.iter().filter(|r| r.epoch == outcome.best_epoch && r.split == "val").last();
    Ok(json!({
        "model": stem,
        "best_epoch": outcome.best_epoch,
        "val_macro_f1": best.map(|r| r.macro_f1),
        "val_auc": best.and_then(|r| r.auc),
    }))
}

fn eval_cmd(global: &GlobalArgs, a: &EvalArgs) -> CliResult<Value> {
    let seed = global.seed.unwrap_or(0);
    let mut config: SuiteConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SuiteConfig::default(),
    };
    if let Some(p) = global.precision {
        config.fusion.precision = p.into();
    }
    if let Some(k) = a.folds {
        config.k = k;
    }
    if let Some(n) = a.resamples {
        config.n_resamples = n;
    }
    if !a.tasks.is_empty() {
        config.tasks = a.tasks.clone();
    }
    if !a.ablations.is_empty() {
        config.ablations = a.ablations.clone();
    }
    if config.k < 2 {
        return Err(CliError::Usage("at least 2 folds are required".into()));
    }
    let table = load_table(&a.features)?;
    let (embeddings, _) = load_embedding_index(&a.embeddings).map_err(data)?;
    log::info!(
        "evaluating {} task(s) x {} ablation(s) over {} folds",
        config.tasks.len(),
        config.ablations.len(),
        config.k
    );
    let report = run_ablation_suite(&table, &embeddings, &config, seed).map_err(data)?;
    write_report(&report, &a.out).map_err(data)?;
    let cfg = serde_json::to_value(&config).map_err(data)?;
    write_json(&a.out.join("config.json"), &resolved("eval", global, seed, a, cfg))?;
    Ok(json!({
        "results": report.results.iter().map(|r| json!({
            "task": r.task.as_str(),
            "ablation": r.ablation.as_str(),
            "auc": r.auc.mean,
            "auc_ci": [r.auc.ci.0, r.auc.ci.1],
            "macro_f1": r.macro_f1.mean,
        })).collect::<Vec<_>>(),
        "out": a.out,
    }))
}

fn export_attn(global: &GlobalArgs, a: &ExportAttnArgs) -> CliResult<Value> {
    let model = FusionModel::load(&a.model).map_err(data)?;
    let table = load_table(&a.features)?;
    let (embeddings, tokens) = load_embedding_index(&a.embeddings).map_err(data)?;
    let examples = build_examples(&table, &embeddings).map_err(data)?;
    let wanted: BTreeMap<&str, ()> = a.memes.iter().map(|m| (m.as_str(), ())).collect();
    for m in wanted.keys() {
        if !examples.iter().any(|e| e.meme_id == *m) {
            return Err(CliError::Data(format!("meme {m} not found in {}", a.features.display())));
        }
    }
    let mut records = Vec::new();
    for e in examples.iter().filter(|e| wanted.is_empty() || wanted.contains_key(e.meme_id.as_str())) {
        let toks = &tokens[&e.meme_id];
        records.push(model.export_attention(e, toks, a.top_k).map_err(|err| CliError::Data(format!("meme {}: {err}", e.meme_id)))?);
    }
    write_ndjson(&a.out, &records).map_err(data)?;
    write_json(&sidecar(&a.out), &resolved("export-attn", global, global.seed.unwrap_or(0), a, json!(null)))?;
    Ok(json!({ "memes": records.len(), "out": a.out }))
}

fn dispatch(cli: &Cli) -> CliResult<Value> {
    let g = &cli.global;
    let (name, summary) = match &cli.command {
        Command::GenSynth(a) => ("gen-synth", gen_synth(g, a)?),
        Command::Extract(a) => ("extract", extract(g, a)?),
        Command::Harmonize(a) => ("harmonize", harmonize_cmd(g, a)?),
        Command::Analyze(a) => ("analyze", analyze(g, a)?),
        Command::Train(a) => ("train", train_cmd(g, a)?),
        Command::Eval(a) => ("eval", eval_cmd(g, a)?),
        Command::ExportAttn(a) => ("export-attn", export_attn(g, a)?),
    };
    Ok(json!({ "command": name, "status": "ok", "summary": summary }))
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = cli.global.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(summary) => {
            if cli.global.json {
                println!("{summary}");
            }
            0
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            1
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            if cli.global.json {
                println!("{}", json!({ "status": "error", "error": m }));
            }
            2
        }
    }
}
