//! Self-describing checkpoint container: a JSON header mapping tensor names
//! to shapes and offsets, followed by raw little-endian f64 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSDC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: u64,
    count: u64,
}

/// An in-memory checkpoint: arbitrary JSON metadata plus named f64 arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<D: ndarray::Dimension>(&mut self, name: &str, arr: ndarray::Array<f64, D>) {
        self.tensors.insert(name.to_string(), arr.into_dyn());
    }

    pub fn get(&self, path: &Path, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::checkpoint(path, format!("missing tensor `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, arr) in &self.tensors {
            let count = arr.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                count,
            });
            offset += count;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;

        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header).map_err(io_err)?;
        for (_, arr) in &self.tensors {
            let data = arr.as_standard_layout();
            for v in data.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::checkpoint(path, "not a CSDC container"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::checkpoint(path, format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        if buf.len() < 16 + header_len {
            return Err(Error::checkpoint(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&buf[16..16 + header_len])
            .map_err(|e| Error::checkpoint(path, format!("bad header: {e}")))?;
        let data = &buf[16 + header_len..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let start = entry.offset as usize * 8;
            let end = start + entry.count as usize * 8;
            if end > data.len() {
                return Err(Error::checkpoint(
                    path,
                    format!("tensor `{}` extends past end of file", entry.name),
                ));
            }
            let expected: usize = entry.shape.iter().product();
            if expected != entry.count as usize {
                return Err(Error::checkpoint(
                    path,
                    format!("tensor `{}` shape/count mismatch", entry.name),
                ));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
                .map_err(|e| Error::checkpoint(path, e.to_string()))?;
            tensors.insert(entry.name, arr);
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }
}

/// Read a required metadata field, failing with the checkpoint path in the message.
pub fn meta_field<T: serde::de::DeserializeOwned>(
    path: &Path,
    meta: &serde_json::Value,
    key: &str,
) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::checkpoint(path, format!("missing metadata `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::checkpoint(path, format!("bad metadata `{key}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.csdc");
        let mut c = Container::new(serde_json::json!({"scale": 4, "note": "x"}));
        c.insert("a.weight", Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f64 * 0.5));
        c.insert("a.bias", Array1::from_vec(vec![1.0, -2.0]));
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back.meta["scale"], 4);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors["a.weight"], c.tensors["a.weight"]);
        assert_eq!(back.tensors["a.bias"], c.tensors["a.bias"]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csdc");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Container::load(&path).is_err());
    }
}
