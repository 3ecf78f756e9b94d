//! Statistically controlled synthetic datasets.
//!
//! Each meme gets a sexism level (exact proportions from `condition_mix`),
//! categories for sexist memes, and `subjects_per_meme` viewers per enabled
//! experiment. Every trial draws its reaction time, fixation count and blink
//! duration from truncated normals whose truncated mean and SD equal the
//! `SynthSpec` targets. EEG is a sum of band-limited Gaussian noise components, one
//! per canonical band, scaled to the baseline band power; condition effects
//! rescale a component only inside the stimulus window, so the 2 s
//! pre-stimulus segment is condition-free.
//!
//! Randomness is drawn from streams keyed by meme or trial id, so output is a
//! pure function of (spec, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    fixture_embedding, hash_token_embedding, write_eeg_recording, write_embedding, write_manifest,
    write_ndjson, EmbeddingIndexEntry, IoError, Manifest, ManifestEntry, TrialPaths,
};
use crate::eeg::{design_bandpass, filtfilt, FilterSpec, Sos};
use crate::rng::stream;
use crate::stats::{normal_cdf, normal_pdf};
use crate::types::{
    canonical_bands, BandName, Beat, Category, ChannelLayout, EegRecording, EtEvent, EtEventKind, Experiment,
    SexismLabels, SexismLevel, Task1, Task2, Trial, ValidationError, N_CHANNELS,
};

/// Which trials an EEG effect applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EffectCondition {
    Sexist,
    Level(SexismLevel),
    Category(Category),
}

impl EffectCondition {
    pub fn matches(&self, labels: &SexismLabels) -> bool {
        match self {
            EffectCondition::Sexist => labels.task1 == Task1::Sexist,
            EffectCondition::Level(l) => labels.level() == Some(*l),
            EffectCondition::Category(c) => labels.has_category(*c),
        }
    }
}

impl TryFrom<String> for EffectCondition {
    type Error = ValidationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "sexist" {
            return Ok(EffectCondition::Sexist);
        }
        if let Some(l) = SexismLevel::ALL.into_iter().find(|l| l.as_str() == s) {
            return Ok(EffectCondition::Level(l));
        }
        Category::from_str(&s)
            .map(EffectCondition::Category)
            .map_err(|_| ValidationError::Unknown { kind: "effect condition", value: s })
    }
}

impl From<EffectCondition> for String {
    fn from(c: EffectCondition) -> String {
        match c {
            EffectCondition::Sexist => "sexist".into(),
            EffectCondition::Level(l) => l.as_str().into(),
            EffectCondition::Category(c) => c.as_str().into(),
        }
    }
}

/// Relative band-power change on one channel for matching trials
/// (`0.5` = +50 %).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegEffect {
    pub condition: EffectCondition,
    pub channel: String,
    pub band: BandName,
    pub relative: f64,
}

/// Mean and SD of a per-trial quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

const fn ms(mean: f64, sd: f64) -> MeanSd {
    MeanSd { mean, sd }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEffect {
    /// Seconds.
    pub rt_s: MeanSd,
    pub fixation_count: MeanSd,
    /// Per-trial mean blink duration, ms.
    pub blink_duration_ms: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub dim: usize,
    pub n_tokens: usize,
    pub vocab_size: usize,
    /// Norm of the label direction added to every token row (0 = pure noise).
    pub text_signal: f64,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec { dim: 32, n_tokens: 12, vocab_size: 500, text_signal: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_memes: usize,
    /// Viewers per meme in each enabled experiment.
    pub subjects_per_meme: usize,
    /// Subject pool size per experiment.
    pub n_subjects: usize,
    pub experiments: Vec<Experiment>,
    /// Proportions of NonSexist, Direct, Judgmental memes.
    pub condition_mix: [f64; 3],
    /// Distribution of the primary category of sexist memes.
    pub category_mix: [f64; 5],
    /// Probability of each additional category on a sexist meme.
    pub extra_category_rate: f64,
    pub eeg_effect: Vec<EegEffect>,
    pub behavior_effect: BTreeMap<SexismLevel, BehaviorEffect>,
    /// µV² per band, Delta..Gamma.
    pub baseline_band_power: [f64; 5],
    pub sample_rate_hz: f64,
    pub pre_stimulus_s: f64,
    pub post_response_s: f64,
    pub blink_rate_hz: f64,
    pub pupil_rate_hz: f64,
    pub ibi_ms: MeanSd,
    pub embedding: Option<EmbeddingSpec>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let behavior_effect = BTreeMap::from([
            (
                SexismLevel::NonSexist,
                BehaviorEffect { rt_s: ms(13.68, 9.10), fixation_count: ms(40.31, 28.37), blink_duration_ms: ms(267.36, 57.65) },
            ),
            (
                SexismLevel::Direct,
                BehaviorEffect { rt_s: ms(15.84, 11.40), fixation_count: ms(44.42, 33.67), blink_duration_ms: ms(261.13, 55.27) },
            ),
            (
                SexismLevel::Judgmental,
                BehaviorEffect { rt_s: ms(17.58, 12.08), fixation_count: ms(50.34, 37.61), blink_duration_ms: ms(263.05, 50.58) },
            ),
        ]);
        SynthSpec {
            n_memes: 60,
            subjects_per_meme: 2,
            n_subjects: 16,
            experiments: vec![Experiment::EtHr, Experiment::EegHr],
            condition_mix: [0.5, 0.25, 0.25],
            category_mix: [0.2; 5],
            extra_category_rate: 0.15,
            eeg_effect: Vec::new(),
            behavior_effect,
            baseline_band_power: [20.0, 10.0, 8.0, 4.0, 1.0],
            sample_rate_hz: 250.0,
            pre_stimulus_s: 2.0,
            post_response_s: 0.5,
            blink_rate_hz: 0.3,
            pupil_rate_hz: 10.0,
            ibi_ms: ms(800.0, 50.0),
            embedding: Some(EmbeddingSpec::default()),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let fail = |m: String| Err(ValidationError::Config(m));
        if self.n_memes == 0 {
            return fail("n_memes must be positive".into());
        }
        if self.subjects_per_meme < 2 {
            return fail("subjects_per_meme must be at least 2".into());
        }
        if self.n_subjects < self.subjects_per_meme {
            return fail("n_subjects must be at least subjects_per_meme".into());
        }
        for (name, mix) in [("condition_mix", &self.condition_mix[..]), ("category_mix", &self.category_mix[..])] {
            if mix.iter().any(|p| !(*p >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("{name} must be non-negative proportions summing to 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.extra_category_rate) {
            return fail("extra_category_rate must lie in [0, 1]".into());
        }
        for level in SexismLevel::ALL {
            let Some(b) = self.behavior_effect.get(&level) else {
                return fail(format!("behavior_effect missing {}", level.as_str()));
            };
            for (name, m) in [("rt_s", b.rt_s), ("fixation_count", b.fixation_count), ("blink_duration_ms", b.blink_duration_ms)] {
                // a normal truncated at zero always has sd < mean
                if !(m.sd > 0.0) || !(m.mean > m.sd) {
                    return fail(format!("{} {name}: need 0 < sd < mean", level.as_str()));
                }
            }
        }
        let layout = ChannelLayout::standard_16();
        for e in &self.eeg_effect {
            if layout.index_of(&e.channel).is_none() {
                return fail(format!("unknown channel {}", e.channel));
            }
            if !(e.relative > -1.0) {
                return fail(format!("relative effect {} must exceed -1", e.relative));
            }
        }
        if self.baseline_band_power.iter().any(|p| !(*p > 0.0)) {
            return fail("baseline_band_power must be positive".into());
        }
        if !(self.sample_rate_hz > 2.0 * canonical_bands()[4].hi_hz) {
            return fail("sample_rate_hz must exceed twice the top band edge".into());
        }
        if !(self.pre_stimulus_s >= 2.0) || !(self.post_response_s >= 0.0) {
            return fail("pre_stimulus_s must be at least 2 and post_response_s non-negative".into());
        }
        if !(self.ibi_ms.mean > 0.0 && self.ibi_ms.sd >= 0.0) || self.blink_rate_hz < 0.0 || self.pupil_rate_hz < 0.0 {
            return fail("rates and IBI must be non-negative".into());
        }
        if let Some(e) = &self.embedding {
            if e.dim == 0 || e.n_tokens == 0 || e.vocab_size == 0 {
                return fail("embedding dim, n_tokens and vocab_size must be positive".into());
            }
        }
        Ok(())
    }
}

/// Truncated (at 0) normal mean and SD for an untruncated `N(mu, sigma)`.
fn truncated_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let alpha = -mu / sigma;
    let lambda = normal_pdf(alpha) / (1.0 - normal_cdf(alpha));
    let mean = mu + sigma * lambda;
    let var = sigma * sigma * (1.0 + alpha * lambda - lambda * lambda);
    (mean, var.max(0.0).sqrt())
}

/// Parameters of the untruncated normal whose restriction to `x > 0` has the
/// given mean and SD.
pub fn untruncated_params(target: MeanSd) -> (f64, f64) {
    let (mut mu, mut sigma) = (target.mean, target.sd);
    for _ in 0..500 {
        let (m, s) = truncated_moments(mu, sigma);
        if (m - target.mean).abs() < 1e-10 * target.mean && (s - target.sd).abs() < 1e-10 * target.sd {
            break;
        }
        mu += target.mean - m;
        sigma *= target.sd / s;
    }
    (mu, sigma)
}

fn positive_normal(r: &mut impl Rng, (mu, sigma): (f64, f64)) -> f64 {
    loop {
        let v = mu + sigma * r.sample::<f64, _>(StandardNormal);
        if v > 0.0 {
            return v;
        }
    }
}

fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Exact per-class counts by largest remainder.
fn apportion(n: usize, mix: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn pick(r: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

struct Meme {
    id: String,
    labels: SexismLabels,
}

fn make_memes(spec: &SynthSpec) -> Vec<Meme> {
    let mut r = stream(spec.seed, "memes");
    let counts = apportion(spec.n_memes, &spec.condition_mix);
    let mut levels: Vec<SexismLevel> =
        SexismLevel::ALL.iter().zip(&counts).flat_map(|(l, &c)| std::iter::repeat_n(*l, c)).collect();
    levels.shuffle(&mut r);
    levels
        .into_iter()
        .enumerate()
        .map(|(i, level)| {
            let labels = match level {
                SexismLevel::NonSexist => SexismLabels::non_sexist(),
                _ => {
                    let primary = pick(&mut r, &spec.category_mix);
                    let mut cats: Vec<Category> = Category::ALL
                        .into_iter()
                        .enumerate()
                        .filter(|&(k, _)| k == primary || r.random::<f64>() < spec.extra_category_rate)
                        .map(|(_, c)| c)
                        .collect();
                    cats.sort();
                    let t2 = if level == SexismLevel::Direct { Task2::Direct } else { Task2::Judgmental };
                    SexismLabels::sexist(Some(t2), cats)
                }
            };
            Meme { id: format!("m{:05}", i + 1), labels }
        })
        .collect()
}

fn experiment_tag(e: Experiment) -> &'static str {
    match e {
        Experiment::EtHr => "et",
        Experiment::EegHr => "eeg",
    }
}

fn band_filters(spec: &SynthSpec) -> Result<Vec<Sos>, ValidationError> {
    canonical_bands()
        .iter()
        .map(|band| {
            design_bandpass(&FilterSpec { order: 4, lo_hz: band.lo_hz, hi_hz: band.hi_hz }, spec.sample_rate_hz)
                .map_err(|e| ValidationError::Config(e.to_string()))
        })
        .collect()
}

/// Unit-variance band-limited noise component for each canonical band.
fn band_components(filters: &[Sos], r: &mut impl Rng, n: usize) -> Result<Vec<Vec<f64>>, ValidationError> {
    filters
        .iter()
        .map(|sos| {
            let x = filtfilt(sos, &normals(r, n)).map_err(|e| ValidationError::Config(e.to_string()))?;
            let mean = x.iter().sum::<f64>() / n as f64;
            let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            Ok(x.iter().map(|v| (v - mean) / sd).collect())
        })
        .collect()
}

fn synth_eeg(spec: &SynthSpec, filters: &[Sos], trial: &Trial, gains: &[[f64; 5]]) -> Result<EegRecording, ValidationError> {
    let fs = spec.sample_rate_hz;
    let mut r = stream(spec.seed, &format!("eeg:{}", trial.trial_id));
    let n = ((trial.response_ms / 1000.0 + spec.post_response_s) * fs).ceil() as usize;
    let onset = (trial.stimulus_onset_ms * fs / 1000.0).round() as usize;
    let end = ((trial.response_ms * fs / 1000.0).round() as usize).min(n);
    let mut data = Vec::with_capacity(N_CHANNELS);
    for gain in gains {
        let comps = band_components(filters, &mut r, n)?;
        let mut ch = vec![0.0f64; n];
        for (b, comp) in comps.iter().enumerate() {
            let base = spec.baseline_band_power[b].sqrt();
            for (i, v) in comp.iter().enumerate() {
                let g = if (onset..end).contains(&i) { base * gain[b] } else { base };
                ch[i] += g * v;
            }
        }
        data.push(ch.into_iter().map(|v| v as f32).collect());
    }
    Ok(EegRecording { sample_rate_hz: fs as f32, data })
}

fn synth_et(spec: &SynthSpec, trial: &Trial, effect: &BehaviorEffect, r: &mut impl Rng) -> Vec<EtEvent> {
    let (onset, response) = trial.window_ms();
    let rt_ms = response - onset;
    let mut events = Vec::new();
    let n_fix = positive_normal(r, untruncated_params(effect.fixation_count)).round() as usize;
    if n_fix > 0 {
        let slot = rt_ms / n_fix as f64;
        for k in 0..n_fix {
            let start = onset + (k as f64 + 0.2) * slot;
            events.push(EtEvent {
                kind: EtEventKind::Fixation,
                start_ms: start,
                end_ms: start + 0.6 * slot,
                pupil_left_mm: None,
                pupil_right_mm: None,
            });
        }
    }
    let blink = positive_normal(r, untruncated_params(effect.blink_duration_ms));
    let n_blink = ((rt_ms / 1000.0 * spec.blink_rate_hz).round() as usize).max(1);
    if blink < rt_ms {
        for _ in 0..n_blink {
            let start = onset + r.random::<f64>() * (rt_ms - blink);
            events.push(EtEvent {
                kind: EtEventKind::Blink,
                start_ms: start,
                end_ms: start + blink,
                pupil_left_mm: None,
                pupil_right_mm: None,
            });
        }
    }
    if spec.pupil_rate_hz > 0.0 {
        let step = 1000.0 / spec.pupil_rate_hz;
        let stop = response + spec.post_response_s * 1000.0;
        let mut t = 0.0;
        while t <= stop {
            events.push(EtEvent {
                kind: EtEventKind::Pupil,
                start_ms: t,
                end_ms: t,
                pupil_left_mm: Some(3.5 + 0.25 * r.sample::<f64, _>(StandardNormal)),
                pupil_right_mm: Some(3.4 + 0.25 * r.sample::<f64, _>(StandardNormal)),
            });
            t += step;
        }
    }
    events.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
    events
}

fn synth_hr(spec: &SynthSpec, trial: &Trial, r: &mut impl Rng) -> Vec<Beat> {
    let stop = trial.response_ms + spec.post_response_s * 1000.0;
    let mut beats = Vec::new();
    let mut t = 0.0;
    loop {
        let ibi = (spec.ibi_ms.mean + spec.ibi_ms.sd * r.sample::<f64, _>(StandardNormal)).max(300.0);
        t += ibi;
        if t > stop {
            break;
        }
        beats.push(Beat { t_ms: t, ibi_ms: ibi });
    }
    beats
}

fn label_direction(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let v: Vec<f64> = hash_token_embedding(&format!("<label:{name}>"), dim, seed).into_iter().map(f64::from).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn synth_embedding(spec: &SynthSpec, e: &EmbeddingSpec, meme: &Meme) -> (Vec<String>, super::Embedding) {
    let mut r = stream(spec.seed, &format!("text:{}", meme.id));
    let tokens: Vec<String> = (0..e.n_tokens).map(|_| format!("w{}", r.random_range(0..e.vocab_size))).collect();
    let mut emb = fixture_embedding(&tokens, e.dim, spec.seed);
    if e.text_signal != 0.0 {
        let l = &meme.labels;
        let mut shift = vec![0.0f64; e.dim];
        let mut add = |name: &str, sign: f64| {
            for (s, d) in shift.iter_mut().zip(label_direction(name, e.dim, spec.seed)) {
                *s += sign * e.text_signal * d;
            }
        };
        add("sexist", if l.task1 == Task1::Sexist { 1.0 } else { -1.0 });
        if let Some(t2) = l.task2 {
            add("judgmental", if t2 == Task2::Judgmental { 1.0 } else { -1.0 });
        }
        for c in Category::ALL {
            add(c.as_str(), if l.has_category(c) { 1.0 } else { -1.0 });
        }
        for row in emb.tokens.iter_mut().chain(std::iter::once(&mut emb.cls)) {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v = (f64::from(*v) + s) as f32;
            }
        }
    }
    (tokens, emb)
}

/// Writes the dataset under `out_dir` (manifest.ndjson, eeg/, et/, hr/, emb/)
/// and returns the manifest.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest, IoError> {
    spec.validate()?;
    let layout = ChannelLayout::standard_16();
    let memes = make_memes(spec);
    let filters = band_filters(spec)?;
    let mut entries = Vec::new();
    let mut index = Vec::new();

    for meme in &memes {
        let emb_path = match &spec.embedding {
            Some(e) => {
                let (tokens, emb) = synth_embedding(spec, e, meme);
                let rel = PathBuf::from(format!("emb/{}.embd", meme.id));
                write_embedding(&out_dir.join(&rel), &emb)?;
                index.push(EmbeddingIndexEntry { meme_id: meme.id.clone(), path: format!("{}.embd", meme.id).into(), dim: e.dim, tokens });
                Some(rel)
            }
            None => None,
        };
        let level = meme.labels.level().expect("synthetic memes have a level");
        let effect = &spec.behavior_effect[&level];
        for &exp in &spec.experiments {
            let tag = experiment_tag(exp);
            let mut r = stream(spec.seed, &format!("viewers:{}:{tag}", meme.id));
            let mut pool: Vec<usize> = (1..=spec.n_subjects).collect();
            pool.shuffle(&mut r);
            let mut viewers = pool[..spec.subjects_per_meme].to_vec();
            viewers.sort_unstable();
            for s in viewers {
                let subject_id = format!("{tag}_s{s:02}");
                let trial_id = format!("{}_{subject_id}", meme.id);
                let mut tr = stream(spec.seed, &format!("trial:{trial_id}"));
                let rt_s = positive_normal(&mut tr, untruncated_params(effect.rt_s));
                let onset = spec.pre_stimulus_s * 1000.0;
                let trial = Trial {
                    trial_id: trial_id.clone(),
                    meme_id: meme.id.clone(),
                    subject_id,
                    session_id: "1".into(),
                    experiment: exp,
                    stimulus_onset_ms: onset,
                    response_ms: onset + (rt_s * 1000.0).max(1.0),
                    labels: meme.labels.clone(),
                };
                let mut paths = TrialPaths { emb: emb_path.clone(), ..Default::default() };
                match exp {
                    Experiment::EegHr => {
                        let mut gains = vec![[1.0f64; 5]; N_CHANNELS];
                        let mut rel = vec![[0.0f64; 5]; N_CHANNELS];
                        for e in spec.eeg_effect.iter().filter(|e| e.condition.matches(&meme.labels)) {
                            rel[layout.index_of(&e.channel).unwrap()][e.band.index()] += e.relative;
                        }
                        for (g, r) in gains.iter_mut().zip(&rel) {
                            for b in 0..5 {
                                g[b] = (1.0 + r[b]).max(0.0).sqrt();
                            }
                        }
                        let rec = synth_eeg(spec, &filters, &trial, &gains)?;
                        let p = PathBuf::from(format!("eeg/{trial_id}.phys"));
                        write_eeg_recording(&out_dir.join(&p), &rec)?;
                        paths.eeg = Some(p);
                    }
                    Experiment::EtHr => {
                        let events = synth_et(spec, &trial, effect, &mut tr);
                        let p = PathBuf::from(format!("et/{trial_id}.ndjson"));
                        write_ndjson(&out_dir.join(&p), &events)?;
                        paths.et = Some(p);
                    }
                }
                let beats = synth_hr(spec, &trial, &mut tr);
                let p = PathBuf::from(format!("hr/{trial_id}.ndjson"));
                write_ndjson(&out_dir.join(&p), &beats)?;
                paths.hr = Some(p);
                entries.push(ManifestEntry { trial, paths, eeg_scale: None });
            }
        }
    }
    if spec.embedding.is_some() {
        write_ndjson(&out_dir.join("emb/index.ndjson"), &index)?;
    }
    write_manifest(&out_dir.join("manifest.ndjson"), &entries)?;
    Ok(Manifest { root: out_dir.to_path_buf(), entries })
}
