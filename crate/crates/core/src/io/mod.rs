//! On-disk formats: EEG binary, ET/HR NDJSON event streams, the trial
//! manifest, and EMBD text-embedding files.

pub mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Beat, EegRecording, EtEvent, SignalRecording, Trial, ValidationError};

pub use synth::{generate_synthetic, SynthSpec};

pub const EEG_MAGIC: &[u8; 4] = b"PHYS";
pub const EEG_VERSION: u16 = 1;
pub const EEG_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 2 + 4 + 8;
pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u16 = 1;
pub const EMBD_HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{0}: bad magic")]
    BadMagic(PathBuf),
    #[error("{path}: {message}")]
    HeaderMismatch { path: PathBuf, message: String },
    #[error("{path}: non-finite sample at channel {channel}, index {index}")]
    NonFiniteSample { path: PathBuf, channel: usize, index: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingFile(path.to_path_buf())
        } else {
            IoError::Io { path: path.to_path_buf(), source: e }
        }
    })
}

pub fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

// ---------------------------------------------------------------- EEG binary

pub fn encode_eeg(rec: &EegRecording) -> Vec<u8> {
    let mut out = Vec::with_capacity(EEG_HEADER_LEN + 4 * rec.n_channels() * rec.n_samples());
    out.extend_from_slice(EEG_MAGIC);
    out.extend_from_slice(&EEG_VERSION.to_le_bytes());
    out.push(0);
    out.push(0);
    out.extend_from_slice(&(rec.n_channels() as u16).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(rec.n_samples() as u64).to_le_bytes());
    for ch in &rec.data {
        for v in ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_eeg(bytes: &[u8], path: &Path) -> Result<EegRecording, IoError> {
    let mismatch = |message: String| IoError::HeaderMismatch { path: path.to_path_buf(), message };
    if bytes.len() < 4 || &bytes[..4] != EEG_MAGIC {
        return Err(IoError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < EEG_HEADER_LEN {
        return Err(mismatch(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EEG_VERSION {
        return Err(mismatch(format!("unsupported version {version}")));
    }
    if bytes[6] != 0 {
        return Err(mismatch(format!("unsupported recording kind {}", bytes[6])));
    }
    let n_channels = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let sample_rate_hz = f32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let n_samples = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let expected = (n_channels as u64)
        .checked_mul(n_samples)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(EEG_HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(mismatch(format!(
            "header declares {n_channels} x {n_samples} samples but file has {} bytes",
            bytes.len()
        )));
    }
    let n_samples = n_samples as usize;
    let payload = &bytes[EEG_HEADER_LEN..];
    let mut data = Vec::with_capacity(n_channels);
    for ch in 0..n_channels {
        let mut row = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let o = 4 * (ch * n_samples + i);
            let v = f32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(IoError::NonFiniteSample { path: path.to_path_buf(), channel: ch, index: i });
            }
            row.push(v);
        }
        data.push(row);
    }
    Ok(EegRecording { sample_rate_hz, data })
}

pub fn read_eeg_recording(path: &Path) -> Result<EegRecording, IoError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(io_err(path))?;
    decode_eeg(&bytes, path)
}

pub fn write_eeg_recording(path: &Path, rec: &EegRecording) -> Result<(), IoError> {
    let mut w = create(path)?;
    w.write_all(&encode_eeg(rec)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------- NDJSON

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_et_events(path: &Path) -> Result<Vec<EtEvent>, IoError> {
    let events: Vec<EtEvent> = read_ndjson(path)?;
    SignalRecording::EtEvents(events.clone()).validate()?;
    Ok(events)
}

pub fn read_heart_ibi(path: &Path) -> Result<Vec<Beat>, IoError> {
    let beats: Vec<Beat> = read_ndjson(path)?;
    SignalRecording::HeartIbi(beats.clone()).validate()?;
    Ok(beats)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eeg: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub et: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb: Option<PathBuf>,
}

/// One manifest line: a trial plus paths relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub trial: Trial,
    pub paths: TrialPaths,
    /// Linear factor applied to raw EEG samples to obtain µV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eeg_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn trials(&self) -> Vec<Trial> {
        self.entries.iter().map(|e| e.trial.clone()).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn eeg(&self, entry: &ManifestEntry) -> Result<Option<EegRecording>, IoError> {
        let Some(p) = &entry.paths.eeg else { return Ok(None) };
        let mut rec = read_eeg_recording(&self.resolve(p))?;
        if let Some(scale) = entry.eeg_scale {
            for v in rec.data.iter_mut().flatten() {
                *v = (f64::from(*v) * scale) as f32;
            }
        }
        Ok(Some(rec))
    }

    pub fn et(&self, entry: &ManifestEntry) -> Result<Option<Vec<EtEvent>>, IoError> {
        entry.paths.et.as_ref().map(|p| read_et_events(&self.resolve(p))).transpose()
    }

    pub fn hr(&self, entry: &ManifestEntry) -> Result<Option<Vec<Beat>>, IoError> {
        entry.paths.hr.as_ref().map(|p| read_heart_ibi(&self.resolve(p))).transpose()
    }
}

/// Loads and validates a manifest: unique trial ids, valid trials, and every
/// referenced file present.
pub fn load_manifest(path: &Path) -> Result<Manifest, IoError> {
    let entries: Vec<ManifestEntry> = read_ndjson(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        e.trial.validate()?;
        if !seen.insert(e.trial.trial_id.as_str()) {
            return Err(ValidationError::Trial {
                trial_id: e.trial.trial_id.clone(),
                reason: "duplicate trial_id".into(),
            }
            .into());
        }
        let p = &e.paths;
        for rel in [&p.eeg, &p.et, &p.hr, &p.emb].into_iter().flatten() {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(IoError::MissingFile(full));
            }
        }
    }
    Ok(Manifest { root, entries })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), IoError> {
    write_ndjson(path, entries)
}

// ---------------------------------------------------------------- EMBD

/// CLS and token embeddings of one meme's enriched text.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub dim: usize,
    pub cls: Vec<f32>,
    /// `n_tokens` rows of `dim` values.
    pub tokens: Vec<Vec<f32>>,
}

impl Embedding {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

pub fn encode_embedding(e: &Embedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBD_HEADER_LEN + 4 * e.dim * (1 + e.n_tokens()));
    out.extend_from_slice(EMBD_MAGIC);
    out.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    out.extend_from_slice(&(e.dim as u32).to_le_bytes());
    out.extend_from_slice(&(e.n_tokens() as u32).to_le_bytes());
    for v in e.cls.iter().chain(e.tokens.iter().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<Embedding, IoError> {
    let mismatch = |message: String| IoError::HeaderMismatch { path: path.to_path_buf(), message };
    if bytes.len() < 4 || &bytes[..4] != EMBD_MAGIC {
        return Err(IoError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < EMBD_HEADER_LEN {
        return Err(mismatch(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBD_VERSION {
        return Err(mismatch(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let n_tokens = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = EMBD_HEADER_LEN as u64 + 4 * dim as u64 * (1 + n_tokens as u64);
    if expected != bytes.len() as u64 {
        return Err(mismatch(format!(
            "header declares dim {dim} and {n_tokens} tokens but file has {} bytes",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[EMBD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(IoError::NonFiniteSample { path: path.to_path_buf(), channel: i / dim.max(1), index: i % dim.max(1) });
    }
    let cls = values[..dim].to_vec();
    let tokens = values[dim..].chunks(dim.max(1)).take(n_tokens).map(<[f32]>::to_vec).collect();
    Ok(Embedding { dim, cls, tokens })
}

pub fn read_embedding(path: &Path) -> Result<Embedding, IoError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(io_err(path))?;
    decode_embedding(&bytes, path)
}

pub fn write_embedding(path: &Path, e: &Embedding) -> Result<(), IoError> {
    let mut w = create(path)?;
    w.write_all(&encode_embedding(e)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// One line of an embedding index: where a meme's EMBD file lives and the
/// token strings aligned with its token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndexEntry {
    pub meme_id: String,
    pub path: PathBuf,
    pub dim: usize,
    pub tokens: Vec<String>,
}

/// Reads an index entry's EMBD file and checks it against the index.
pub fn read_indexed_embedding(index_dir: &Path, entry: &EmbeddingIndexEntry) -> Result<Embedding, IoError> {
    let path = index_dir.join(&entry.path);
    let e = read_embedding(&path)?;
    if e.dim != entry.dim {
        return Err(IoError::HeaderMismatch {
            path,
            message: format!("index dim {} but file dim {}", entry.dim, e.dim),
        });
    }
    if e.n_tokens() != entry.tokens.len() {
        return Err(IoError::HeaderMismatch {
            path,
            message: format!("index lists {} tokens but file has {}", entry.tokens.len(), e.n_tokens()),
        });
    }
    Ok(e)
}

/// Loads every embedding listed in an NDJSON index; paths resolve against the
/// index directory. Returns embeddings and token strings keyed by meme.
pub fn load_embedding_index(
    index_path: &Path,
) -> Result<(BTreeMap<String, Embedding>, BTreeMap<String, Vec<String>>), IoError> {
    let entries: Vec<EmbeddingIndexEntry> = read_ndjson(index_path)?;
    let dir = index_path.parent().unwrap_or(Path::new(""));
    let mut embeddings = BTreeMap::new();
    let mut tokens = BTreeMap::new();
    for e in entries {
        let emb = read_indexed_embedding(dir, &e)?;
        if embeddings.insert(e.meme_id.clone(), emb).is_some() {
            return Err(IoError::Parse {
                path: index_path.to_path_buf(),
                line: 0,
                message: format!("duplicate meme_id {}", e.meme_id),
            });
        }
        tokens.insert(e.meme_id, e.tokens);
    }
    Ok((embeddings, tokens))
}

/// Deterministic pseudo-embedding of a token string: standard normals from a
/// stream keyed by the token, scaled by `1/sqrt(dim)`.
pub fn hash_token_embedding(token: &str, dim: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut r = crate::rng::stream(seed, &format!("token:{token}"));
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| (r.sample::<f64, _>(rand_distr::StandardNormal) * s) as f32).collect()
}

/// Fixture embedding for a token list: hashed token rows, CLS = token mean.
pub fn fixture_embedding(tokens: &[String], dim: usize, seed: u64) -> Embedding {
    let rows: Vec<Vec<f32>> = tokens.iter().map(|t| hash_token_embedding(t, dim, seed)).collect();
    let n = rows.len().max(1) as f64;
    let cls = (0..dim)
        .map(|j| (rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / n) as f32)
        .collect();
    Embedding { dim, cls, tokens: rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n_ch: usize, n: usize) -> EegRecording {
        EegRecording {
            sample_rate_hz: 250.0,
            data: (0..n_ch).map(|c| (0..n).map(|i| (c * 1000 + i) as f32 * 0.25 - 3.0).collect()).collect(),
        }
    }

    #[test]
    fn eeg_header_layout() {
        let b = encode_eeg(&rec(16, 1250));
        assert_eq!(b.len(), 22 + 16 * 1250 * 4);
        assert_eq!(&b[..4], b"PHYS");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[8..10], &[16, 0]);
        assert_eq!(f32::from_le_bytes(b[10..14].try_into().unwrap()), 250.0);
        assert_eq!(u64::from_le_bytes(b[14..22].try_into().unwrap()), 1250);
        // channel-major: first value of channel 1 follows all of channel 0
        let o = 22 + 4 * 1250;
        assert_eq!(f32::from_le_bytes(b[o..o + 4].try_into().unwrap()), 1000.0 * 0.25 - 3.0);
    }

    #[test]
    fn eeg_decode_errors() {
        let p = Path::new("x.eeg");
        let b = encode_eeg(&rec(16, 1250));
        assert_eq!(decode_eeg(&b, p).unwrap(), rec(16, 1250));
        assert!(matches!(decode_eeg(&b[..b.len() - 4], p), Err(IoError::HeaderMismatch { .. })));
        assert!(matches!(decode_eeg(&b[..10], p), Err(IoError::HeaderMismatch { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_eeg(&bad, p), Err(IoError::BadMagic(_))));
        let mut nan = b.clone();
        nan[22 + 4 * 7..22 + 4 * 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_eeg(&nan, p), Err(IoError::NonFiniteSample { channel: 0, index: 7, .. })));
    }

    #[test]
    fn embd_roundtrip_and_mismatch() {
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let e = fixture_embedding(&tokens, 8, 3);
        let b = encode_embedding(&e);
        assert_eq!(b.len(), 14 + 4 * 8 * 4);
        assert_eq!(decode_embedding(&b, Path::new("e")).unwrap(), e);
        let mut wrong = b.clone();
        wrong[6..10].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_embedding(&wrong, Path::new("e")), Err(IoError::HeaderMismatch { .. })));
    }

    #[test]
    fn fixture_embeddings_are_deterministic_and_distinct() {
        assert_eq!(hash_token_embedding("tok", 16, 1), hash_token_embedding("tok", 16, 1));
        assert_ne!(hash_token_embedding("tok", 16, 1), hash_token_embedding("tol", 16, 1));
        assert_ne!(hash_token_embedding("tok", 16, 1), hash_token_embedding("tok", 16, 2));
        let tokens: Vec<String> = vec!["x".into(), "y".into()];
        let e = fixture_embedding(&tokens, 4, 0);
        for j in 0..4 {
            let m = (f64::from(e.tokens[0][j]) + f64::from(e.tokens[1][j])) / 2.0;
            assert!((f64::from(e.cls[j]) - m).abs() < 1e-6);
        }
    }
}
