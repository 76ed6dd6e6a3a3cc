//! Named-tensor archive used for every checkpoint and persisted index.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic  "COGSNTA1"
//! 8 bytes   header length N, u64 little-endian
//! N bytes   UTF-8 JSON header
//! ...       payload: tensors back to back, little-endian
//! ```
//!
//! The header is `{"metadata": <any JSON>, "tensors": [{"name", "dtype",
//! "shape", "offset", "length"}]}` with `offset`/`length` in bytes relative to
//! the payload start. `dtype` is `"F32"` (the default for checkpoints) or
//! `"F64"`. Entries are sorted by name and tile the payload with no gaps.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CogsError, Result};

pub const MAGIC: &[u8; 8] = b"COGSNTA1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<(&'static str, usize)> {
    match dtype {
        DType::F32 => Ok(("F32", 4)),
        DType::F64 => Ok(("F64", 8)),
        other => Err(CogsError::Archive(format!("unsupported dtype {other:?}"))),
    }
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, tensors: BTreeMap::new() }
    }

    pub fn with_tensors(metadata: serde_json::Value, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { metadata, tensors }
    }

    /// Adds every tensor of `map` under `prefix.`.
    pub fn insert_prefixed(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) {
        for (k, v) in map {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let (dname, _) = dtype_name(t.dtype())?;
            let offset = payload.len() as u64;
            match t.dtype() {
                DType::F32 => {
                    for v in t.flatten_all()?.to_vec1::<f32>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in t.flatten_all()?.to_vec1::<f64>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dname.to_string(),
                shape: t.dims().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header { metadata: self.metadata.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and validates the header without decoding tensors.
    pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CogsError::Archive("missing magic or truncated preamble".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let start = 16usize
            .checked_add(hlen)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| CogsError::Archive("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..start])?;
        let payload_len = (bytes.len() - start) as u64;
        let mut cursor = 0u64;
        for e in &header.tensors {
            let elem = match e.dtype.as_str() {
                "F32" => 4u64,
                "F64" => 8u64,
                other => return Err(CogsError::Archive(format!("unknown dtype `{other}` for `{}`", e.name))),
            };
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if numel * elem != e.length {
                return Err(CogsError::Archive(format!(
                    "`{}`: shape {:?} needs {} bytes, header says {}",
                    e.name,
                    e.shape,
                    numel * elem,
                    e.length
                )));
            }
            if e.offset != cursor {
                return Err(CogsError::Archive(format!("`{}` does not start at byte {cursor}", e.name)));
            }
            cursor += e.length;
        }
        if cursor != payload_len {
            return Err(CogsError::Archive(format!("payload has {payload_len} bytes, header accounts for {cursor}")));
        }
        Ok((header, start))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = Self::read_header(bytes)?;
        let payload = &bytes[start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let t = match e.dtype.as_str() {
                "F32" => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
                _ => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
            };
            tensors.insert(e.name, t);
        }
        Ok(Self { metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised archive, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new(serde_json::json!({"kind": "test"}));
        a.tensors.insert("b".into(), Tensor::new(&[[1.0f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap());
        a.tensors.insert("a".into(), Tensor::new(&[0.5f64, -1.0, 7.25], &Device::Cpu).unwrap());
        a
    }

    #[test]
    fn roundtrip_preserves_values_and_dtypes() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.metadata, a.metadata);
        assert_eq!(b.tensors["a"].to_vec1::<f64>().unwrap(), vec![0.5, -1.0, 7.25]);
        assert_eq!(b.tensors["b"].to_vec2::<f32>().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 12, 20, bytes.len() - 1] {
            assert!(Archive::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn header_lengths_match_shapes() {
        let bytes = sample().to_bytes().unwrap();
        let (header, start) = Archive::read_header(&bytes).unwrap();
        let total: u64 = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() as u64 * if e.dtype == "F32" { 4 } else { 8 })
            .sum();
        assert_eq!(total, (bytes.len() - start) as u64);
        assert_eq!(header.tensors[0].name, "a");
    }

    #[test]
    fn tampered_shape_is_rejected() {
        let a = sample();
        let mut bytes = a.to_bytes().unwrap();
        let pos = bytes.windows(5).position(|w| w == b"[2,2]").unwrap();
        bytes[pos + 3] = b'3';
        assert!(matches!(Archive::from_bytes(&bytes), Err(CogsError::Archive(_))));
    }
}
