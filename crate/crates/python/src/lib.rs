//! Python bindings: feature tables, harmonization, statistics, metrics and
//! the fusion model. Configurations and structured results cross the
//! boundary as JSON-compatible dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ::physio_fusion::analysis::{anova_by, Grouping};
use ::physio_fusion::eval::{self, run_ablation_suite, split_validation, write_report, SuiteConfig};
use ::physio_fusion::features::{self, ExtractConfig};
use ::physio_fusion::fusion::{self, build_examples, Ablation, FusionConfig, Task};
use ::physio_fusion::harmonize::{self, HarmonizeConfig};
use ::physio_fusion::io::{self, Embedding, SynthSpec};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(o) => {
            let dict = PyDict::new(py);
            for (k, x) in o {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn ser<'py, T: Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(x).map_err(value_err)?)
}

/// Overlays the top-level keys of an optional dict onto `T::default()`.
fn config<T: Serialize + DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(o) = obj.filter(|o| !o.is_none()) else {
        return Ok(T::default());
    };
    let mut base = serde_json::to_value(T::default()).map_err(value_err)?;
    match (from_py(o)?, &mut base) {
        (Value::Object(user), Value::Object(b)) => b.extend(user),
        _ => return Err(value_err("config must be a dict")),
    }
    serde_json::from_value(base).map_err(value_err)
}

fn task(name: &str) -> PyResult<Task> {
    serde_json::from_value(Value::String(name.to_string())).map_err(value_err)
}

/// Trial-level feature matrix with label metadata.
#[pyclass(module = "physio_fusion")]
struct FeatureTable {
    inner: features::FeatureTable,
}

#[pymethods]
impl FeatureTable {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        Ok(FeatureTable { inner: features::FeatureTable::read_csv(&path).map_err(io_err)? })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(io_err)
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns.clone()
    }

    #[getter]
    fn trial_ids(&self) -> Vec<String> {
        self.inner.meta.iter().map(|m| m.trial_id.clone()).collect()
    }

    #[getter]
    fn meme_ids(&self) -> Vec<String> {
        self.inner.meta.iter().map(|m| m.meme_id.clone()).collect()
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.meta.iter().map(|m| m.subject_id.clone()).collect()
    }

    /// Per-row labels as dicts.
    fn labels<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner.meta.iter().map(|m| ser(py, &m.labels)).collect()
    }

    /// Values of one column; NaN marks a missing value.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let j = self.inner.column_index(name).ok_or_else(|| value_err(format!("unknown column {name}")))?;
        Ok(self.inner.column(j))
    }

    /// Row-major copy of the matrix.
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.values.len()
    }

    fn __repr__(&self) -> String {
        format!("FeatureTable({} rows x {} columns)", self.inner.values.len(), self.inner.columns.len())
    }
}

/// Text embedding of one meme: a CLS vector and per-token rows.
#[pyclass(module = "physio_fusion")]
struct TextEmbedding {
    inner: Embedding,
}

#[pymethods]
impl TextEmbedding {
    #[new]
    fn new(cls: Vec<f32>, tokens: Vec<Vec<f32>>) -> PyResult<Self> {
        let dim = cls.len();
        if tokens.iter().any(|t| t.len() != dim) {
            return Err(value_err("token rows must match the CLS dimension"));
        }
        Ok(TextEmbedding { inner: Embedding { dim, cls, tokens } })
    }

    /// Reads an EMBD file.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(TextEmbedding { inner: io::read_embedding(&path).map_err(io_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_embedding(&path, &self.inner).map_err(io_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        io::encode_embedding(&self.inner)
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(TextEmbedding { inner: io::decode_embedding(&data, std::path::Path::new("<bytes>")).map_err(value_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn cls(&self) -> Vec<f32> {
        self.inner.cls.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<Vec<f32>> {
        self.inner.tokens.clone()
    }
}

/// Text embeddings and token strings loaded from an NDJSON index.
#[pyclass(module = "physio_fusion")]
struct EmbeddingIndex {
    embeddings: BTreeMap<String, Embedding>,
    tokens: BTreeMap<String, Vec<String>>,
}

#[pymethods]
impl EmbeddingIndex {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (embeddings, tokens) = io::load_embedding_index(&path).map_err(io_err)?;
        Ok(EmbeddingIndex { embeddings, tokens })
    }

    fn meme_ids(&self) -> Vec<String> {
        self.embeddings.keys().cloned().collect()
    }

    fn get(&self, meme_id: &str) -> PyResult<TextEmbedding> {
        let e = self.embeddings.get(meme_id).ok_or_else(|| value_err(format!("meme {meme_id} not in index")))?;
        Ok(TextEmbedding { inner: e.clone() })
    }

    fn __len__(&self) -> usize {
        self.embeddings.len()
    }
}

/// Trained cross-attention fusion classifier.
#[pyclass(module = "physio_fusion")]
struct FusionModel {
    inner: fusion::FusionModel,
}

#[pymethods]
impl FusionModel {
    /// Loads `<stem>.json` and `<stem>.bin`.
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(FusionModel { inner: fusion::FusionModel::load(&stem).map_err(io_err)? })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        self.inner.save(&stem).map_err(io_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        ser(py, &self.inner.config)
    }

    /// Probabilities per meme present in both the table and the index.
    fn predict(&self, table: &FeatureTable, index: &EmbeddingIndex) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let examples = build_examples(&table.inner, &index.embeddings).map_err(value_err)?;
        let refs: Vec<_> = examples.iter().collect();
        let probs = fusion::predict(&self.inner, &refs).map_err(value_err)?;
        Ok(examples.iter().map(|e| e.meme_id.clone()).zip(probs).collect())
    }

    /// Top-k token attention per branch for each requested meme (all when empty).
    #[pyo3(signature = (table, index, memes=None, top_k=5))]
    fn export_attention<'py>(
        &self,
        py: Python<'py>,
        table: &FeatureTable,
        index: &EmbeddingIndex,
        memes: Option<Vec<String>>,
        top_k: usize,
    ) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let examples = build_examples(&table.inner, &index.embeddings).map_err(value_err)?;
        let memes = memes.unwrap_or_default();
        for m in &memes {
            if !examples.iter().any(|e| &e.meme_id == m) {
                return Err(value_err(format!("meme {m} not found")));
            }
        }
        examples
            .iter()
            .filter(|e| memes.is_empty() || memes.contains(&e.meme_id))
            .map(|e| {
                let rec = self.inner.export_attention(e, &index.tokens[&e.meme_id], top_k).map_err(value_err)?;
                ser(py, &rec)
            })
            .collect()
    }
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None, seed=None))]
fn generate_synthetic(out_dir: PathBuf, spec: Option<&Bound<'_, PyAny>>, seed: Option<u64>) -> PyResult<PathBuf> {
    let mut spec: SynthSpec = config(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    io::generate_synthetic(&spec, &out_dir).map_err(io_err)?;
    Ok(out_dir.join("manifest.ndjson"))
}

/// Extracts one feature row per trial of a manifest.
#[pyfunction]
#[pyo3(signature = (manifest, config=None))]
fn extract_features(manifest: PathBuf, config: Option<&Bound<'_, PyAny>>) -> PyResult<FeatureTable> {
    let cfg: ExtractConfig = self::config(config)?;
    let m = io::load_manifest(&manifest).map_err(io_err)?;
    Ok(FeatureTable { inner: features::extract_features(&m, &cfg).map_err(value_err)? })
}

/// Harmonizes across subjects; returns the new table and fitted parameters.
#[pyfunction]
#[pyo3(signature = (table, config=None))]
fn harmonize_table<'py>(py: Python<'py>, table: &FeatureTable, config: Option<&Bound<'_, PyAny>>) -> PyResult<(FeatureTable, Bound<'py, PyAny>)> {
    let cfg: HarmonizeConfig = self::config(config)?;
    let t = &table.inner;
    let batches: Vec<String> = t.meta.iter().map(|m| m.subject_id.clone()).collect();
    let params = harmonize::fit(&t.columns, &t.values, &batches, cfg).map_err(value_err)?;
    let values = params.apply(&t.values, &batches).map_err(value_err)?;
    let out = features::FeatureTable { columns: params.output_columns(), meta: t.meta.clone(), values };
    Ok((FeatureTable { inner: out }, ser(py, &params)?))
}

/// One-way ANOVA of a metric across label groups (`task1`, `task2` or a category).
#[pyfunction]
fn anova<'py>(py: Python<'py>, table: &FeatureTable, by: &str, metric: &str) -> PyResult<Bound<'py, PyAny>> {
    let by: Grouping = by.parse().map_err(value_err)?;
    ser(py, &anova_by(&table.inner, by, metric).map_err(value_err)?)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(value_err)
}

/// Macro, per-class and positive-class F1.
#[pyfunction]
fn f1_scores(preds: Vec<usize>, labels: Vec<usize>, n_classes: usize) -> PyResult<(f64, Vec<f64>, f64)> {
    let f = eval::f1_scores(&preds, &labels, n_classes).map_err(value_err)?;
    Ok((f.macro_f1, f.per_class, f.f1_positive))
}

/// Trains one model with a stratified validation split for checkpoint selection.
#[pyfunction]
#[pyo3(signature = (table, index, config=None, seed=0, val_fraction=0.2))]
fn train<'py>(
    py: Python<'py>,
    table: &FeatureTable,
    index: &EmbeddingIndex,
    config: Option<&Bound<'_, PyAny>>,
    seed: u64,
    val_fraction: f64,
) -> PyResult<(FusionModel, Bound<'py, PyAny>)> {
    let cfg: FusionConfig = self::config(config)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(value_err("val_fraction must lie in [0, 1)"));
    }
    let examples = build_examples(&table.inner, &index.embeddings).map_err(value_err)?;
    let (tr, va) = split_validation(&examples, cfg.task, val_fraction, seed, &format!("val:{}", cfg.task.as_str()));
    let outcome = py.detach(|| fusion::train(&cfg, &tr, &va, seed)).map_err(value_err)?;
    let log = ser(py, &outcome.log)?;
    Ok((FusionModel { inner: outcome.model }, log))
}

/// Cross-validated ablation suite; optionally writes the report files.
#[pyfunction]
#[pyo3(signature = (table, index, config=None, seed=0, out_dir=None))]
fn run_suite<'py>(
    py: Python<'py>,
    table: &FeatureTable,
    index: &EmbeddingIndex,
    config: Option<&Bound<'_, PyAny>>,
    seed: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SuiteConfig = self::config(config)?;
    let report = py.detach(|| run_ablation_suite(&table.inner, &index.embeddings, &cfg, seed)).map_err(value_err)?;
    if let Some(dir) = out_dir {
        write_report(&report, &dir).map_err(io_err)?;
    }
    ser(py, &report)
}

/// Number of trainable parameters for a configuration and input shape.
#[pyfunction]
fn parameter_count(config: &Bound<'_, PyAny>, text_dim: usize, n_eeg: usize, n_ethr: usize) -> PyResult<usize> {
    let cfg: FusionConfig = self::config(Some(config))?;
    let dims = fusion::FusionDims { d_text: text_dim, f_eeg: n_eeg, f_ethr: n_ethr };
    Ok(fusion::parameter_count(&cfg, &dims))
}

#[pyfunction]
fn task_outputs(name: &str) -> PyResult<usize> {
    Ok(task(name)?.n_outputs())
}

#[pyfunction]
fn ablations() -> Vec<&'static str> {
    Ablation::ALL.iter().map(|a| a.as_str()).collect()
}

#[pymodule(name = "physio_fusion")]
pub fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FeatureTable>()?;
    m.add_class::<TextEmbedding>()?;
    m.add_class::<EmbeddingIndex>()?;
    m.add_class::<FusionModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(harmonize_table, m)?)?;
    m.add_function(wrap_pyfunction!(anova, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(task_outputs, m)?)?;
    m.add_function(wrap_pyfunction!(ablations, m)?)?;
    Ok(())
}
