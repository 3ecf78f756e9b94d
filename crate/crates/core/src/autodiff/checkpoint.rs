//! Parameter checkpoints: `<stem>.json` index plus `<stem>.bin` holding every
//! parameter as f32 little-endian, concatenated in index order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::io::IoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub payload: String,
    pub params: Vec<CheckpointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint(stem: &Path, store: &ParamStore, config: Option<serde_json::Value>) -> Result<(), IoError> {
    let (json, bin) = paths(stem);
    let mut payload = Vec::with_capacity(store.n_values() * 4);
    let mut params = Vec::with_capacity(store.params.len());
    let mut offset = 0;
    for p in &store.params {
        params.push(CheckpointEntry { name: p.name.clone(), shape: p.value.shape.clone(), offset });
        offset += p.value.len();
        for &v in &p.value.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        payload: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        params,
        config,
    };
    crate::io::create(&bin)?.write_all(&payload).map_err(io_err(&bin))?;
    let text = serde_json::to_string_pretty(&index).map_err(|e| IoError::Parse { path: json.clone(), line: 0, message: e.to_string() })?;
    crate::io::create(&json)?.write_all(text.as_bytes()).map_err(io_err(&json))
}

pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, CheckpointIndex), IoError> {
    let (json, _) = paths(stem);
    let read = |p: &Path| {
        fs::read(p).map_err(|e| if e.kind() == std::io::ErrorKind::NotFound { IoError::MissingFile(p.to_path_buf()) } else { io_err(p)(e) })
    };
    let index: CheckpointIndex = serde_json::from_slice(&read(&json)?)
        .map_err(|e| IoError::Parse { path: json.clone(), line: e.line(), message: e.to_string() })?;
    let bin = json.parent().unwrap_or(Path::new(".")).join(&index.payload);
    let bytes = read(&bin)?;
    let mut store = ParamStore::default();
    for e in &index.params {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * 4, (e.offset + n) * 4);
        if end > bytes.len() {
            return Err(IoError::HeaderMismatch { path: bin, message: format!("{} extends past payload end", e.name) });
        }
        let data = bytes[start..end].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        store.add(&e.name, Tensor { shape: e.shape.clone(), data });
    }
    let expected = index.params.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(IoError::HeaderMismatch { path: bin, message: format!("payload is {} bytes, index needs {expected}", bytes.len()) });
    }
    Ok((store, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::default();
        s.add("a.w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-3, 7.0]).unwrap());
        s.add("b", Tensor::new(vec![3], vec![1.0 / 3.0, 0.0, -0.0]).unwrap());
        let stem = dir.path().join("ckpt/model");
        save_checkpoint(&stem, &s, Some(serde_json::json!({"d": 4}))).unwrap();
        let (back, index) = load_checkpoint(&stem).unwrap();
        let mut rounded = s.clone();
        rounded.round_to_f32();
        assert_eq!(back, rounded);
        assert_eq!(index.config.unwrap()["d"], 4);
        assert_eq!(fs::metadata(stem.with_extension("bin")).unwrap().len(), 28);

        fs::write(stem.with_extension("bin"), [0u8; 8]).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(IoError::HeaderMismatch { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(IoError::MissingFile(_))));
    }
}
