//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TNSR" | version: u32 = 1 | header_len: u64 | header (UTF-8 JSON) | payload
//! ```
//!
//! The header maps each tensor name to `{"shape":[..],"offset":u64,"nbytes":u64}`
//! with offsets relative to the first payload byte. The payload holds raw
//! little-endian `f32` values and starts right after the header, unpadded.
//! Saving always writes tensors contiguously in name order, which makes the
//! encoding canonical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Result, TrimError};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// One named tensor: a shape and its `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered set of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: BTreeMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a raw tensor, replacing any entry with the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        if tensor.data.len() != tensor.numel() {
            return Err(TrimError::shape(format!(
                "tensor shape {:?} needs {} values, got {}",
                tensor.shape,
                tensor.numel(),
                tensor.data.len()
            )));
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(TrimError::format("non-finite tensor value"));
        }
        self.entries.insert(name.into(), tensor);
        Ok(())
    }

    pub fn insert_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) -> Result<()> {
        self.insert(
            name,
            Tensor {
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice().iter().map(|v| v.widen() as f32).collect(),
            },
        )
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.insert(
            name,
            Tensor {
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Reads a rank-2 tensor as a matrix.
    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| TrimError::format(format!("missing tensor {name:?}")))?;
        if t.shape.len() != 2 {
            return Err(TrimError::format(format!(
                "tensor {name:?} has shape {:?}, expected rank 2",
                t.shape
            )));
        }
        Matrix::from_vec(
            t.shape[0],
            t.shape[1],
            t.data.iter().map(|&v| T::narrow(v as f64)).collect(),
        )
    }

    /// Reads a rank-1 tensor.
    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| TrimError::format(format!("missing tensor {name:?}")))?;
        if t.shape.len() != 1 {
            return Err(TrimError::format(format!(
                "tensor {name:?} has shape {:?}, expected rank 1",
                t.shape
            )));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    /// Tensor names in ascending order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let nbytes = (t.data.len() * 4) as u64;
            header.insert(
                name.clone(),
                EntryHeader {
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(TrimError::format("file shorter than preamble"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(TrimError::format("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TrimError::format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE_LEN as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| TrimError::format("truncated header"))? as usize;
        let header: BTreeMap<String, EntryHeader> =
            serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
                .map_err(|e| TrimError::format(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
        for (name, e) in &header {
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| TrimError::format(format!("{name:?}: shape overflows")))?;
            if numel.checked_mul(4) != Some(e.nbytes) {
                return Err(TrimError::format(format!(
                    "{name:?}: nbytes {} does not match shape {:?}",
                    e.nbytes, e.shape
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .ok_or_else(|| TrimError::format(format!("{name:?}: offset overflows")))?;
            if end > payload.len() as u64 {
                return Err(TrimError::format(format!(
                    "{name:?}: truncated payload (needs {end} bytes, have {})",
                    payload.len()
                )));
            }
            spans.push((e.offset, end, name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(TrimError::format(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }

        let mut entries = BTreeMap::new();
        for (name, e) in header {
            let start = e.offset as usize;
            let raw = &payload[start..start + e.nbytes as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(TrimError::format(format!("{name:?}: non-finite value")));
            }
            entries.insert(name, Tensor { shape: e.shape, data });
        }
        Ok(TensorContainer { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes the container atomically (temp file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| TrimError::contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w23() -> Matrix<f32> {
        Matrix::from_rows(&[[1.0f32, -2.0, 3.5], [0.25, 0.0, -7.0]])
    }

    #[test]
    fn round_trip_small_matrix() {
        let mut c = TensorContainer::new();
        c.insert_matrix("w", &w23()).unwrap();
        let bytes = c.to_bytes();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.matrix::<f32>("w").unwrap(), w23());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        // 2x3 f32 = 24 bytes advertised; cut 4 of them
        let mut c = TensorContainer::new();
        c.insert_matrix("w", &w23()).unwrap();
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = TensorContainer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, TrimError::Format(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn names_enumerate_in_order() {
        let mut c = TensorContainer::new();
        c.insert_matrix("layer1.weight", &w23()).unwrap();
        c.insert_matrix("layer0.weight", &w23()).unwrap();
        let names: Vec<_> = c.names().collect();
        assert_eq!(names, ["layer0.weight", "layer1.weight"]);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = TensorContainer::new().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(TrimError::Format(_))));
        let mut bytes = TensorContainer::new().to_bytes();
        bytes[4] = 2;
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(TrimError::Format(_))));
    }

    fn raw(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn overlapping_entries_are_rejected() {
        let header = r#"{"a":{"shape":[2],"offset":0,"nbytes":8},"b":{"shape":[2],"offset":4,"nbytes":8}}"#;
        let err = TensorContainer::from_bytes(&raw(header, &[0u8; 12])).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn nbytes_must_match_shape() {
        let header = r#"{"a":{"shape":[3],"offset":0,"nbytes":8}}"#;
        assert!(TensorContainer::from_bytes(&raw(header, &[0u8; 12])).is_err());
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let header = r#"{"a":{"shape":[1],"offset":0,"nbytes":4}}"#;
        let err = TensorContainer::from_bytes(&raw(header, &f32::NAN.to_le_bytes())).unwrap_err();
        assert!(matches!(err, TrimError::Format(_)));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tnsr");
        let mut c = TensorContainer::new();
        c.insert_matrix("w", &w23()).unwrap();
        c.insert_vector("v", &[0.5, 0.25]).unwrap();
        c.save(&path).unwrap();
        let back = TensorContainer::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes());
    }
}
