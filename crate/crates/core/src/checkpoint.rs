//! Binary checkpoint container shared by the chord model and the
//! regressors: magic, a length-prefixed JSON header, then raw tensors.
//!
//! ```text
//! b"V2MCKPT1" | u32 LE header length | header JSON | f64 LE tensor data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"V2MCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON configuration and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value, meta: Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            config,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn extend_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, m) in params.iter() {
            self.push(format!("{prefix}{name}"), m.clone());
        }
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, m) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.add(rest, m.clone());
            }
        }
        store
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let data_len: usize = self.tensors.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let mut data = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry
                .rows
                .checked_mul(entry.cols)
                .ok_or_else(|| corrupt("tensor shape overflows"))?;
            if data.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            tensors.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, values)));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_exact() {
        let mut c = Checkpoint::new("test", json!({"d": 3}), json!({"epochs": 2}));
        c.push(
            "a",
            Matrix::from_rows(&[vec![1.0, -0.0, f64::MIN_POSITIVE], vec![1e300, 0.1, 3.0]]),
        );
        c.push("b", Matrix::zeros(0, 4));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new("test", json!(null), json!(null));
        c.push("a", Matrix::zeros(2, 2));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(c.expect_kind("other").is_err());
    }
}
