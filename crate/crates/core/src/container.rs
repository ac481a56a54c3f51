//! Named-array checkpoint container.
//!
//! One file holds a JSON metadata document plus any number of named numeric
//! arrays, stored as little-endian `f32`. Layout, byte-exact:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "MPICHKP1"
//! 8       8     header length `n` as u64 little-endian
//! 16      n     header: UTF-8 JSON, compact encoding
//! 16+n    ...   payload: all arrays' elements as f32 little-endian,
//!               concatenated in header order
//! ```
//!
//! The header is `{"meta": <caller JSON>, "arrays": [{"name", "shape"},…]}`
//! with arrays sorted by name, so identical contents always serialize to
//! identical bytes. In memory arrays are `f64` (training precision); saving
//! quantizes to `f32`. Loading a file and saving it again reproduces the
//! file byte for byte.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MPICHKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint: JSON metadata plus named f64 arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new() -> Self {
        Container {
            meta: serde_json::Value::Null,
            arrays: BTreeMap::new(),
        }
    }

    /// Sets `meta` from any serializable value.
    pub fn set_meta<M: Serialize>(&mut self, meta: &M) -> Result<()> {
        self.meta = serde_json::to_value(meta)
            .map_err(|e| Error::Data(format!("metadata does not serialize: {e}")))?;
        Ok(())
    }

    /// Deserializes `meta` into a concrete type.
    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Data(format!("metadata does not match expected schema: {e}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    /// Serializes to bytes (quantizing arrays to f32 little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = self.arrays.values().map(|a| a.len()).sum();
        let mut out = Vec::with_capacity(16 + header_json.len() + 4 * payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for a in self.arrays.values() {
            for v in a.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path_label: &str, data: &[u8]) -> Result<Self> {
        let malformed = |reason: &str| Error::Malformed {
            path: path_label.to_string(),
            reason: reason.to_string(),
        };
        let mut cursor = std::io::Cursor::new(data);
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| malformed("file shorter than magic"))?;
        if &magic != MAGIC {
            return Err(malformed("bad magic (not a checkpoint container)"));
        }
        let mut len_bytes = [0u8; 8];
        cursor
            .read_exact(&mut len_bytes)
            .map_err(|_| malformed("missing header length"))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        cursor
            .read_exact(&mut header_bytes)
            .map_err(|_| malformed("truncated header"))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| malformed(&format!("header is not valid JSON: {e}")))?;
        let mut arrays = BTreeMap::new();
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            cursor
                .read_exact(&mut raw)
                .map_err(|_| malformed(&format!("truncated payload for array {}", entry.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(entry.shape.clone(), values)
                .map_err(|_| malformed(&format!("shape/length mismatch for array {}", entry.name)))?;
            if arrays.insert(entry.name.clone(), arr).is_some() {
                return Err(malformed(&format!("duplicate array name {}", entry.name)));
            }
        }
        let mut rest = Vec::new();
        cursor
            .read_to_end(&mut rest)
            .map_err(|_| malformed("unreadable trailer"))?;
        if !rest.is_empty() {
            return Err(malformed("trailing bytes after payload"));
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Container::from_bytes(&path.display().to_string(), &data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn sample() -> Container {
        let mut c = Container::new();
        c.meta = serde_json::json!({"step": 7, "kind": "demo"});
        c.insert(
            "b.bias",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.25, 2.0]).unwrap(),
        );
        c.insert(
            "a.weight",
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, -0.5, 0.375]).unwrap(),
        );
        c
    }

    #[test]
    fn roundtrip_preserves_f32_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let c = sample();
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        // all sample values are exactly representable in f32
        assert_eq!(c.arrays, back.arrays);
        assert_eq!(back.meta["step"], 7);
    }

    #[test]
    fn load_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let c = sample();
        c.save(&p1).unwrap();
        Container::load(&p1).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn same_content_same_bytes_regardless_of_insert_order() {
        let mut a = Container::new();
        a.insert("x", ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());
        a.insert("y", ArrayD::from_shape_vec(IxDyn(&[1]), vec![2.0]).unwrap());
        let mut b = Container::new();
        b.insert("y", ArrayD::from_shape_vec(IxDyn(&[1]), vec![2.0]).unwrap());
        b.insert("x", ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn malformed_files_rejected_with_reason() {
        let good = sample().to_bytes();

        let err = Container::from_bytes("t", &good[..4]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(Container::from_bytes("t", &bad_magic).is_err());

        let truncated = &good[..good.len() - 2];
        let err = Container::from_bytes("t", truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        let err = Container::from_bytes("t", &trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn quantizes_to_f32_on_save() {
        let mut c = Container::new();
        let v = 0.1f64; // not exactly representable; f32 round differs from f64
        c.insert("x", ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).unwrap());
        let back = Container::from_bytes("t", &c.to_bytes()).unwrap();
        let got = back.arrays["x"][[0]];
        assert_eq!(got, 0.1f32 as f64);
        assert_ne!(got, v);
    }
}
