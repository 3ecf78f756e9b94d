//! Cross-attention fusion classifier over text embeddings and per-subject
//! physiological reaction sequences.
//!
//! Text: CLS and token embeddings pass through a two-layer adapter
//! (`lower`: D_text to D with GELU, `upper`: D to D). Each enabled
//! physiological branch projects its rows to D, layer-normalizes them as
//! queries against the layer-normalized adapted tokens, runs multi-head
//! cross-attention (output projection zero-initialized), and pools the rows
//! with a learned weighted sum. The head concatenates the adapted CLS with the
//! pooled branches and applies a one-hidden-layer GELU MLP.

pub mod data;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use crate::io::IoError;
use crate::rng::{stream, Rng};
use crate::types::{Category, SexismLabels, Task1, Task2};

pub use data::{build_examples, FusionBatch, InputScaling, MemeExample, Standardizer};
pub use train::{predict, train, TrainLogRecord, TrainOutcome};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("loss diverged at epoch {epoch} (phase {phase}), batch {batch}: {detail}")]
    DivergedLoss { epoch: usize, phase: u8, batch: usize, detail: String },
    #[error("{expected} token strings expected, got {got}")]
    TokenCountMismatch { expected: usize, got: usize },
    #[error("no embedding for meme {0}")]
    MissingEmbedding(String),
    #[error("meme {0} has trials with different labels")]
    InconsistentLabels(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("meme {0} has no physiological rows in any enabled branch")]
    NoPhysiology(String),
    #[error("no training examples for the task")]
    EmptyTrainingSet,
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    T1,
    T2,
    T3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::T1, Task::T2, Task::T3];

    pub fn n_outputs(self) -> usize {
        match self {
            Task::T1 | Task::T2 => 1,
            Task::T3 => Category::ALL.len(),
        }
    }

    /// Targets for a meme, `None` when the meme is outside the task's scope.
    /// T1: sexist = 1 (ties excluded). T2: direct = 1 vs judgmental = 0 over
    /// sexist memes. T3: one indicator per category over sexist memes.
    pub fn target(self, l: &SexismLabels) -> Option<Vec<f64>> {
        match self {
            Task::T1 => match l.task1 {
                Task1::Sexist => Some(vec![1.0]),
                Task1::NonSexist => Some(vec![0.0]),
                Task1::Tie => None,
            },
            Task::T2 => match (l.task1, l.task2) {
                (Task1::Sexist, Some(Task2::Direct)) => Some(vec![1.0]),
                (Task1::Sexist, Some(Task2::Judgmental)) => Some(vec![0.0]),
                _ => None,
            },
            Task::T3 => (l.task1 == Task1::Sexist)
                .then(|| Category::ALL.iter().map(|c| f64::from(u8::from(l.task3.contains(c)))).collect()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::T1 => "T1",
            Task::T2 => "T2",
            Task::T3 => "T3",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "T1" | "TASK1" => Ok(Task::T1),
            "T2" | "TASK2" => Ok(Task::T2),
            "T3" | "TASK3" => Ok(Task::T3),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLrs {
    pub lower: f64,
    pub upper: f64,
    pub head: f64,
}

/// Which physiological branches are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    Eeg,
    EegEtHr,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Baseline, Ablation::Eeg, Ablation::EegEtHr];

    pub fn uses_eeg(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_ethr(self) -> bool {
        self == Ablation::EegEtHr
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline (content only)",
            Ablation::Eeg => "+ EEG",
            Ablation::EegEtHr => "+ EEG + ET/HR",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Eeg => "eeg",
            Ablation::EegEtHr => "eeg_et_hr",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Ablation::Baseline),
            "eeg" => Ok(Ablation::Eeg),
            "eeg_et_hr" => Ok(Ablation::EegEtHr),
            _ => Err(format!("unknown ablation `{s}` (baseline, eeg, eeg_et_hr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_lrs: PhaseLrs,
    pub task: Task,
    /// Overrides the inverse-odds weights computed from training labels.
    pub pos_weights: Option<Vec<f64>>,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Adds the projected physiological rows to the attention output ahead of
    /// the (zero-initialized) output projection.
    pub residual: bool,
    pub precision: Precision,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 4,
            model_dim: 256,
            mlp_hidden: 128,
            dropout: 0.1,
            phase1_epochs: 5,
            phase1_lr: 5e-5,
            phase2_epochs: 10,
            phase2_lrs: PhaseLrs { lower: 2e-6, upper: 1e-5, head: 5e-5 },
            task: Task::T1,
            pos_weights: None,
            ablation: Ablation::EegEtHr,
            batch_size: 4,
            weight_decay: 0.01,
            residual: true,
            precision: Precision::F64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.mlp_hidden == 0 || self.batch_size == 0 {
            return bad("mlp_hidden and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        let lrs = [self.phase1_lr, self.phase2_lrs.lower, self.phase2_lrs.upper, self.phase2_lrs.head];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(w) = &self.pos_weights {
            if w.len() != self.task.n_outputs() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad("pos_weights must be positive, one per output");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub d_text: usize,
    pub f_eeg: usize,
    pub f_ethr: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Eeg,
    EtHr,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Eeg => "eeg",
            Branch::EtHr => "ethr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub dims: FusionDims,
    pub scaling: InputScaling,
    #[serde(skip)]
    pub params: ParamStore,
}

/// Parameter group used for learning-rate assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    AdapterLower,
    AdapterUpper,
    Fusion,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("adapter.lower.") {
        ParamGroup::AdapterLower
    } else if name.starts_with("adapter.upper.") {
        ParamGroup::AdapterUpper
    } else {
        ParamGroup::Fusion
    }
}

enum Init {
    Uniform(usize),
    Zeros,
    Ones,
}

/// Closed-form parameter count.
pub fn parameter_count(config: &FusionConfig, dims: &FusionDims) -> usize {
    let (dt, d, h, k) = (dims.d_text, config.model_dim, config.mlp_hidden, config.task.n_outputs());
    let adapter = dt * d + d + d * d + d;
    let branch = |f: usize| f * d + d + 4 * d + 4 * (d * d + d) + d + d * h;
    let head = d * h + h + h * k + k;
    let mut n = adapter + head;
    if config.ablation.uses_eeg() {
        n += branch(dims.f_eeg);
    }
    if config.ablation.uses_ethr() {
        n += branch(dims.f_ethr);
    }
    n
}

impl FusionModel {
    /// Builds a model. Every parameter draws from its own stream keyed by its
    /// name, so parameters shared between ablations initialize identically.
    pub fn new(config: FusionConfig, dims: FusionDims, scaling: InputScaling, seed: u64) -> Result<FusionModel, FusionError> {
        config.validate()?;
        if dims.d_text == 0 {
            return Err(FusionError::Config("text dimension must be positive".into()));
        }
        let (dt, d, h, k) = (dims.d_text, config.model_dim, config.mlp_hidden, config.task.n_outputs());
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("adapter.lower.w".into(), vec![dt, d], Init::Uniform(dt)),
            ("adapter.lower.b".into(), vec![d], Init::Uniform(dt)),
            ("adapter.upper.w".into(), vec![d, d], Init::Uniform(d)),
            ("adapter.upper.b".into(), vec![d], Init::Uniform(d)),
        ];
        for (branch, f, on) in [(Branch::Eeg, dims.f_eeg, config.ablation.uses_eeg()), (Branch::EtHr, dims.f_ethr, config.ablation.uses_ethr())] {
            if !on {
                continue;
            }
            if f == 0 {
                return Err(FusionError::Config(format!("{} branch enabled without features", branch.as_str())));
            }
            let p = branch.as_str();
            specs.extend([
                (format!("{p}.proj.w"), vec![f, d], Init::Uniform(f)),
                (format!("{p}.proj.b"), vec![d], Init::Uniform(f)),
                (format!("{p}.ln_q.g"), vec![d], Init::Ones),
                (format!("{p}.ln_q.b"), vec![d], Init::Zeros),
                (format!("{p}.ln_kv.g"), vec![d], Init::Ones),
                (format!("{p}.ln_kv.b"), vec![d], Init::Zeros),
            ]);
            for m in ["q", "k", "v"] {
                specs.push((format!("{p}.attn.w{m}"), vec![d, d], Init::Uniform(d)));
                specs.push((format!("{p}.attn.b{m}"), vec![d], Init::Uniform(d)));
            }
            specs.extend([
                (format!("{p}.attn.wo"), vec![d, d], Init::Zeros),
                (format!("{p}.attn.bo"), vec![d], Init::Zeros),
                (format!("{p}.pool.w"), vec![d], Init::Zeros),
                (format!("head.{p}.w"), vec![d, h], Init::Uniform(d)),
            ]);
        }
        specs.extend([
            ("head.cls.w".into(), vec![d, h], Init::Uniform(d)),
            ("head.b".into(), vec![h], Init::Uniform(d)),
            ("head.out.w".into(), vec![h, k], Init::Uniform(h)),
            ("head.out.b".into(), vec![k], Init::Uniform(h)),
        ]);
        let mut params = ParamStore::default();
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(fan_in) => {
                    use rand::Rng as _;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = stream(seed, &format!("init:{name}"));
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            params.add(&name, Tensor { shape, data });
        }
        if config.precision == Precision::F32 {
            params.round_to_f32();
        }
        Ok(FusionModel { config, dims, scaling, params })
    }

    fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.config.ablation.uses_eeg() {
            out.push(Branch::Eeg);
        }
        if self.config.ablation.uses_ethr() {
            out.push(Branch::EtHr);
        }
        out
    }

    pub fn batch(&self, examples: &[&MemeExample]) -> Result<FusionBatch, FusionError> {
        let branches = self.branches();
        if !branches.is_empty() {
            for e in examples {
                let has = branches.iter().any(|b| match b {
                    Branch::Eeg => !e.eeg.is_empty(),
                    Branch::EtHr => !e.ethr.is_empty(),
                });
                if !has {
                    return Err(FusionError::NoPhysiology(e.meme_id.clone()));
                }
            }
        }
        let batch = FusionBatch::new(examples, &self.scaling, self.config.task)?;
        if batch.cls.cols() != self.dims.d_text && !batch.is_empty() {
            return Err(FusionError::DimensionMismatch(format!("text dimension {} vs model {}", batch.cls.cols(), self.dims.d_text)));
        }
        Ok(batch)
    }

    /// Builds the forward graph for `batch` on `g` against `params`.
    /// `dropout` carries the generator for training; `None` disables dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        batch: &FusionBatch,
        mut dropout: Option<&mut Rng>,
    ) -> Result<ForwardVars, FusionError> {
        let p = |g: &mut Graph, name: &str| g.param_named(params, name);
        let rate = self.config.dropout;
        let (b, dt) = (batch.len(), self.dims.d_text);
        let (lw, lb, uw, ub) = (p(g, "adapter.lower.w"), p(g, "adapter.lower.b"), p(g, "adapter.upper.w"), p(g, "adapter.upper.b"));
        let adapt = |g: &mut Graph, x: Var| -> Result<Var, AutodiffError> {
            let h = g.linear(x, lw, Some(lb))?;
            let h = g.gelu(h)?;
            g.linear(h, uw, Some(ub))
        };
        let cls = g.constant(Tensor { shape: vec![b, dt], data: batch.cls.data.clone() });
        let cls = adapt(g, cls)?;
        let tokens = g.constant(batch.tokens.clone());
        let tokens = adapt(g, tokens)?;

        let hw = p(g, "head.cls.w");
        let hb = p(g, "head.b");
        let mut hidden = g.linear(cls, hw, Some(hb))?;
        let mut attn = Vec::new();
        for branch in self.branches() {
            let n = branch.as_str();
            let (x, mask) = match branch {
                Branch::Eeg => (&batch.eeg, &batch.eeg_mask),
                Branch::EtHr => (&batch.ethr, &batch.ethr_mask),
            };
            let x = g.constant(x.clone());
            let (pw, pb) = (p(g, &format!("{n}.proj.w")), p(g, &format!("{n}.proj.b")));
            let xp = g.linear(x, pw, Some(pb))?;
            let (qg, qb) = (p(g, &format!("{n}.ln_q.g")), p(g, &format!("{n}.ln_q.b")));
            let qn = g.layer_norm(xp, qg, qb)?;
            let (kg, kb) = (p(g, &format!("{n}.ln_kv.g")), p(g, &format!("{n}.ln_kv.b")));
            let kvn = g.layer_norm(tokens, kg, kb)?;
            let proj = |g: &mut Graph, x: Var, m: &str| -> Result<Var, AutodiffError> {
                let w = g.param_named(params, &format!("{n}.attn.w{m}"));
                let bias = g.param_named(params, &format!("{n}.attn.b{m}"));
                g.linear(x, w, Some(bias))
            };
            let q = proj(g, qn, "q")?;
            let k = proj(g, kvn, "k")?;
            let v = proj(g, kvn, "v")?;
            let a = g.attention(q, k, v, &batch.token_mask, self.config.heads)?;
            let mixed = if self.config.residual { g.add(a, xp)? } else { a };
            let mut o = proj(g, mixed, "o")?;
            if let Some(rng) = dropout.as_deref_mut() {
                o = g.dropout(o, rate, rng)?;
            }
            let pool_w = p(g, &format!("{n}.pool.w"));
            let pooled = g.attention_pool(o, pool_w, mask, true)?;
            let w = p(g, &format!("head.{n}.w"));
            let contrib = g.linear(pooled, w, None)?;
            hidden = g.add(hidden, contrib)?;
            attn.push((branch, a, pooled));
        }
        let mut h = g.gelu(hidden)?;
        if let Some(rng) = dropout.as_deref_mut() {
            h = g.dropout(h, rate, rng)?;
        }
        let (ow, ob) = (p(g, "head.out.w"), p(g, "head.out.b"));
        let logits = g.linear(h, ow, Some(ob))?;
        Ok(ForwardVars { logits, attention: attn })
    }

    /// Logits `[B, K]` and per-branch attention weights `[B, heads, S, T]`.
    pub fn forward(&self, examples: &[&MemeExample]) -> Result<ForwardOutput, FusionError> {
        let batch = self.batch(examples)?;
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, &self.params, &batch, None)?;
        let attention = vars
            .attention
            .iter()
            .map(|&(b, a, _)| (b, g.attention_weights(a).expect("attention node")))
            .collect();
        Ok(ForwardOutput { logits: g.value(vars.logits).clone(), attention })
    }

    /// Sigmoid probabilities `[B][K]`, dropout disabled.
    pub fn predict_proba(&self, examples: &[&MemeExample]) -> Result<Vec<Vec<f64>>, FusionError> {
        let out = self.forward(examples)?;
        let k = self.config.task.n_outputs();
        Ok(out.logits.data.chunks(k).map(|r| r.iter().map(|&z| sigmoid(z)).collect()).collect())
    }

    /// Per-branch attention maps for one meme with the top-`k` tokens per
    /// physiological row (by head-averaged weight).
    pub fn export_attention(&self, example: &MemeExample, tokens: &[String], top_k: usize) -> Result<AttentionRecord, FusionError> {
        if tokens.len() != example.tokens.len() {
            return Err(FusionError::TokenCountMismatch { expected: example.tokens.len(), got: tokens.len() });
        }
        let out = self.forward(&[example])?;
        let mut branches = Vec::new();
        for (branch, w) in out.attention {
            let (heads, s, t) = (w.shape[1], w.shape[2], w.shape[3]);
            let rows = match branch {
                Branch::Eeg => example.eeg.len(),
                Branch::EtHr => example.ethr.len(),
            };
            let weights: Vec<Vec<Vec<f64>>> =
                (0..heads).map(|h| (0..rows).map(|r| w.data[(h * s + r) * t..][..t].to_vec()).collect()).collect();
            let top_tokens = (0..rows)
                .map(|r| {
                    let avg: Vec<f64> = (0..t).map(|j| (0..heads).map(|h| weights[h][r][j]).sum::<f64>() / heads as f64).collect();
                    let mut order: Vec<usize> = (0..t).collect();
                    order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
                    order.iter().take(top_k).map(|&j| TokenWeight { token: tokens[j].clone(), index: j, weight: avg[j] }).collect()
                })
                .collect();
            branches.push(BranchAttention { branch: branch.as_str().to_string(), weights, top_tokens });
        }
        Ok(AttentionRecord { meme_id: example.meme_id.clone(), tokens: tokens.to_vec(), branches })
    }
}

impl FusionModel {
    /// Writes `<stem>.json` (parameter index plus model settings) and `<stem>.bin`.
    pub fn save(&self, stem: &std::path::Path) -> Result<(), FusionError> {
        let meta = serde_json::to_value(self).map_err(|e| FusionError::Config(e.to_string()))?;
        Ok(crate::autodiff::save_checkpoint(stem, &self.params, Some(meta))?)
    }

    pub fn load(stem: &std::path::Path) -> Result<FusionModel, FusionError> {
        let (params, index) = crate::autodiff::load_checkpoint(stem)?;
        let meta = index.config.ok_or_else(|| FusionError::Config("checkpoint lacks model settings".into()))?;
        let mut model: FusionModel = serde_json::from_value(meta).map_err(|e| FusionError::Config(e.to_string()))?;
        let expected = FusionModel::new(model.config.clone(), model.dims, model.scaling.clone(), 0)?;
        let names = |s: &ParamStore| s.params.iter().map(|p| (p.name.clone(), p.value.shape.clone())).collect::<Vec<_>>();
        if names(&expected.params) != names(&params) {
            return Err(FusionError::Config("checkpoint parameters do not match the model layout".into()));
        }
        model.params = params;
        Ok(model)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Graph handles of a forward pass; attention entries are
/// `(branch, attention node, pooled node)`.
pub struct ForwardVars {
    pub logits: Var,
    pub attention: Vec<(Branch, Var, Var)>,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub attention: Vec<(Branch, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchAttention {
    pub branch: String,
    /// `[head][row][token]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub top_tokens: Vec<Vec<TokenWeight>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub meme_id: String,
    pub tokens: Vec<String>,
    pub branches: Vec<BranchAttention>,
}
