//! Versioned binary container for named `f32` tensors plus JSON metadata.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (`kind`, `meta`, tensor index), then raw little-endian `f32` data in
//! index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"INKRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn write(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = tensors.values().map(|t| t.len() * 4).sum();
    let mut buf = Vec::with_capacity(20 + header.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write to a sibling temp file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut offset = 20 + hlen;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::zeros(&[3]));
        write(&path, "test", serde_json::json!({"x": 1}), &tensors).unwrap();
        let c = read(&path).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.meta["x"], 1);
        for (k, v) in &tensors {
            let got = &c.tensors[k];
            assert_eq!(got.shape(), v.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got), bits(v));
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));

        let tensors = BTreeMap::from([("w".to_string(), Tensor::zeros(&[8]))]);
        write(&path, "t", serde_json::Value::Null, &tensors).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
    }
}
