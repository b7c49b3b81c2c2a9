//! Flat tensor container used for backbone weights (`LASTW\0`), side
//! weights (`LASTS\0`) and image datasets (`LASTD\0`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       6     magic
//! 6       4     u32 header length H
//! 10      H     UTF-8 JSON header
//! 10+H    4·n   f32 payload, tensors back to back in header order
//! ```
//!
//! The header is `{"format":"last-tensors","version":1,"meta":{..},
//! "tensors":[{"name":..,"shape":[..],"offset":..}]}` where `offset` counts
//! f32 elements from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Magic = [u8; 6];

pub const BACKBONE_MAGIC: Magic = *b"LASTW\0";
pub const SIDE_MAGIC: Magic = *b"LASTS\0";
pub const DATASET_MAGIC: Magic = *b"LASTD\0";

const FORMAT: &str = "last-tensors";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(magic: Magic, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: (*name).to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        meta: meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * offset);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], magic: Magic, path: &Path) -> Result<TensorFile> {
    if bytes.len() < 10 || bytes[..6] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {:?}", String::from_utf8_lossy(&magic[..5])),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let payload = &bytes[10 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::format(path, format!("tensor {} past end of payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::format(path, err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok(TensorFile {
        meta: header.meta,
        tensors,
    })
}

pub fn read_file(path: &Path, magic: Magic) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_magic() {
        let t = Tensor::zeros(&[2]);
        let bytes = encode(SIDE_MAGIC, &serde_json::json!({}), &[("a", &t)]);
        let err = decode(&bytes, BACKBONE_MAGIC, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1], vec![1.5]).unwrap();
        let bytes = encode(BACKBONE_MAGIC, &serde_json::json!({"k": 1}), &[("w", &t)]);
        assert_eq!(&bytes[..6], b"LASTW\0");
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 10 + hlen + 4);
        assert_eq!(&bytes[10 + hlen..], &1.5f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn f32_values_roundtrip(vals in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = encode(DATASET_MAGIC, &serde_json::Value::Null, &[("t", &t)]);
            let back = decode(&bytes, DATASET_MAGIC, Path::new("mem")).unwrap();
            prop_assert!(back.get("t").unwrap().bit_eq(&t));
        }
    }
}
