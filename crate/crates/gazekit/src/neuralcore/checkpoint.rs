//! Weight checkpoints: a one-line JSON header (magic, version, caller
//! metadata, tensor manifest) followed by raw little-endian f64 data.
//! The byte layout is stable, so checkpoints double as regression
//! fixtures and reproducibility witnesses.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: &str = "gazekit.ckpt";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, Tensor>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CheckpointError::Incompatible("missing header terminator".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.magic != MAGIC {
        return Err(CheckpointError::Incompatible(format!("bad magic {:?}", header.magic)));
    }
    if header.version != VERSION {
        return Err(CheckpointError::Incompatible(format!(
            "version {} (expected {VERSION})",
            header.version
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| {
            CheckpointError::Incompatible(format!("truncated tensor {:?}", entry.name))
        })?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data));
    }
    Ok((header.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_and_byte_stability() {
        let dir = tempdir().unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]);
        let b = Tensor::from_vec(&[3], vec![9.0, 8.0, 7.0]);
        let meta = serde_json::json!({"kind": "test", "seed": 42});
        let named = vec![("w".to_string(), &a), ("b".to_string(), &b)];

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &meta, &named).unwrap();
        save_checkpoint(&p2, &meta, &named).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (meta_back, tensors) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta_back["seed"], 42);
        assert_eq!(tensors["w"], a);
        assert_eq!(tensors["b"], b);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"{\"magic\":\"other\",\"version\":1,\"meta\":null,\"tensors\":[]}\n")
            .unwrap();
        assert!(matches!(load_checkpoint(&p), Err(CheckpointError::Incompatible(_))));
    }
}
