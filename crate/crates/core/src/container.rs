//! Binary container used for sample files and checkpoints.
//!
//! Layout: 4-byte magic, `u32` version, `u64` header length, UTF-8 JSON
//! header, then the arrays as little-endian `f64` in header order. The header
//! is `{"arrays": [{"name", "shape"}...], "meta": {...}}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::linalg::DenseMatrix;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{0} trailing bytes after the last array")]
    Trailing(usize),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arrays: Vec<ArrayEntry>,
    meta: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<(String, DenseMatrix)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseMatrix) {
        self.arrays.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn encode(&self, magic: &[u8; 4]) -> Vec<u8> {
        let header = Header {
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ArrayEntry { name: name.clone(), shape: [m.rows(), m.cols()] })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = self.arrays.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.arrays {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(ContainerError::Truncated(format!("{} bytes, need at least 16", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(ContainerError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(ContainerError::Truncated(format!("header of {header_len} bytes")));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| ContainerError::Header(e.to_string()))?;
        let mut data = &body[header_len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let [rows, cols] = entry.shape;
            let n = rows.checked_mul(cols).ok_or_else(|| ContainerError::Header(format!("shape of {}", entry.name)))?;
            if data.len() < 8 * n {
                return Err(ContainerError::Truncated(format!("array {}", entry.name)));
            }
            let values: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let m = DenseMatrix::new(rows, cols, values).expect("length checked");
            arrays.push((entry.name, m));
        }
        if !data.is_empty() {
            return Err(ContainerError::Trailing(data.len()));
        }
        Ok(Self { meta: header.meta, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"name": "s", "n": 3}));
        c.push("a", DenseMatrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 1e300]]));
        c.push("b", DenseMatrix::zeros(0, 4));
        c.push("c", DenseMatrix::column_vector(&[0.1, 0.2, 0.3]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode(b"GNWD");
        assert_eq!(&bytes[..4], b"GNWD");
        let back = Container::decode(&bytes, b"GNWD").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(b"GNWD"), bytes);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let bytes = sample().encode(b"GNWD");
        assert!(matches!(Container::decode(&bytes, b"GNWC"), Err(ContainerError::Magic { .. })));
        assert!(matches!(Container::decode(&bytes[..bytes.len() - 1], b"GNWD"), Err(ContainerError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Container::decode(&extra, b"GNWD"), Err(ContainerError::Trailing(1)));
        let mut v2 = bytes;
        v2[4] = 2;
        assert_eq!(Container::decode(&v2, b"GNWD"), Err(ContainerError::Version(2)));
    }
}
