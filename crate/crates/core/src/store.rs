//! `.tlitensors` container.
//!
//! Layout: an 8-byte little-endian `u64` header length `n`, then `n` bytes of
//! UTF-8 JSON `{"tensors": {name: {"dtype":"f32","shape":[..],"offset":o,"nbytes":b}}}`,
//! then the data section. Offsets are relative to the start of the data
//! section; values are little-endian binary32 in row-major order. The writer
//! emits tensors sorted by name with contiguous regions and a compact header,
//! so its output is a pure function of the tensor map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Named tensors, ordered by name.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

const LEN_PREFIX: usize = 8;
const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("header error: {0}")]
    Header(String),
    #[error("tensor `{name}`: region {start}..{end} exceeds data section of {len} bytes")]
    Bounds {
        name: String,
        start: u64,
        end: u64,
        len: usize,
    },
    #[error("tensor `{name}` contains a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorMeta>,
}

pub fn read_store(bytes: &[u8]) -> Result<TensorMap, StoreError> {
    if bytes.len() < LEN_PREFIX {
        return Err(StoreError::Header(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..LEN_PREFIX].try_into().unwrap());
    let header_end = (LEN_PREFIX as u64)
        .checked_add(n)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            StoreError::Header(format!(
                "header length {n} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header: Header = serde_json::from_slice(&bytes[LEN_PREFIX..header_end])
        .map_err(|e| StoreError::Header(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut regions: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    let mut out = TensorMap::new();
    for (name, meta) in &header.tensors {
        if meta.dtype != "f32" {
            return Err(StoreError::Header(format!(
                "tensor `{name}`: unsupported dtype \"{}\"",
                meta.dtype
            )));
        }
        if meta.shape.is_empty() || meta.shape.len() > MAX_RANK || meta.shape.contains(&0) {
            return Err(StoreError::Header(format!(
                "tensor `{name}`: shape {:?} must have rank 1-4 and positive dims",
                meta.shape
            )));
        }
        let count = meta
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| StoreError::Header(format!("tensor `{name}`: shape overflows")))?;
        if count.checked_mul(4) != Some(meta.nbytes) {
            return Err(StoreError::Header(format!(
                "tensor `{name}`: nbytes {} does not equal 4 x {count}",
                meta.nbytes
            )));
        }
        let end = meta.offset.checked_add(meta.nbytes);
        let start = meta.offset;
        let end = match end {
            Some(end) if end <= data.len() as u64 => end,
            _ => {
                return Err(StoreError::Bounds {
                    name: name.clone(),
                    start,
                    end: end.unwrap_or(u64::MAX),
                    len: data.len(),
                })
            }
        };
        regions.push((start, end, name));

        let raw = &data[start as usize..end as usize];
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                name: name.clone(),
                index,
            });
        }
        let tensor = Tensor::new(meta.shape.clone(), values)
            .map_err(|e| StoreError::Header(format!("tensor `{name}`: {e}")))?;
        out.insert(name.clone(), tensor);
    }

    regions.sort_unstable();
    for pair in regions.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (start, _, next) = pair[1];
        if start < prev_end {
            return Err(StoreError::Header(format!(
                "tensors `{prev}` and `{next}` overlap"
            )));
        }
    }
    Ok(out)
}

/// Serializes `tensors` in canonical layout. Tensors are expected to be finite.
pub fn write_store(tensors: &TensorMap) -> Vec<u8> {
    let mut offset = 0u64;
    let mut header = Header {
        tensors: BTreeMap::new(),
    };
    for (name, t) in tensors {
        let nbytes = 4 * t.len() as u64;
        header.tensors.insert(
            name.clone(),
            TensorMeta {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let json = serde_json::to_vec(&header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(LEN_PREFIX + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
