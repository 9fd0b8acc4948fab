//! "LCR1" self-describing container: a JSON header (manifest of named
//! tensors with dtype/shape/offset plus free-form metadata) followed by raw
//! little-endian arrays. Used for datasets, checkpoints and prediction dumps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LCR1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Incremental writer; tensors are appended then flushed with [`Lcr1Writer::write_to`].
pub struct Lcr1Writer {
    meta: Value,
    tensors: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Lcr1Writer {
    pub fn new(meta: Value) -> Self {
        Lcr1Writer {
            meta,
            tensors: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, dtype: &str, shape: &[usize], bytes: Vec<u8>) {
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len() as u64,
            byte_len: bytes.len() as u64,
        });
        self.data.extend_from_slice(&bytes);
    }

    pub fn put_f64(&mut self, name: &str, arr: &ArrayD<f64>) {
        let flat: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "f64", arr.shape(), flat);
    }

    pub fn put_f32(&mut self, name: &str, arr: &ArrayD<f32>) {
        let flat: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "f32", arr.shape(), flat);
    }

    pub fn put_u16(&mut self, name: &str, arr: &ArrayD<u16>) {
        let flat: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "u16", arr.shape(), flat);
    }

    pub fn put_i64(&mut self, name: &str, arr: &ArrayD<i64>) {
        let flat: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "i64", arr.shape(), flat);
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header_json.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&self.data);
        fs::write(path, out)?;
        Ok(())
    }
}

/// A fully loaded container. Desk-scale files are small; we read eagerly.
pub struct Lcr1File {
    pub meta: Value,
    entries: BTreeMap<String, TensorEntry>,
    data: Vec<u8>,
}

impl Lcr1File {
    pub fn read_from(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        Self::from_bytes(&raw)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        if raw.len() < 12 || &raw[0..4] != MAGIC {
            return Err(Error::format("missing LCR1 magic"));
        }
        let header_len = u64::from_le_bytes(raw[4..12].try_into().unwrap()) as usize;
        let data_start = 12 + header_len;
        if raw.len() < data_start {
            return Err(Error::format("truncated header"));
        }
        let header: Header = serde_json::from_slice(&raw[12..data_start])?;
        let data = raw[data_start..].to_vec();
        let mut entries = BTreeMap::new();
        for e in header.tensors {
            let end = e.offset + e.byte_len;
            if end as usize > data.len() {
                return Err(Error::format(format!(
                    "tensor '{}' extends past end of file",
                    e.name
                )));
            }
            let expected = e.shape.iter().product::<usize>() * dtype_size(&e.dtype)?;
            if expected as u64 != e.byte_len {
                return Err(Error::format(format!(
                    "tensor '{}' shape/byte_len mismatch",
                    e.name
                )));
            }
            entries.insert(e.name.clone(), e);
        }
        Ok(Lcr1File {
            meta: header.meta,
            entries,
            data,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn entry(&self, name: &str, dtype: &str) -> Result<(&TensorEntry, &[u8])> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::format(format!("tensor '{name}' not in container")))?;
        if e.dtype != dtype {
            return Err(Error::format(format!(
                "tensor '{name}' is {}, requested {dtype}",
                e.dtype
            )));
        }
        let bytes = &self.data[e.offset as usize..(e.offset + e.byte_len) as usize];
        Ok((e, bytes))
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        let (e, bytes) = self.entry(name, "f64")?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|_| Error::format(format!("bad shape for '{name}'")))
    }

    pub fn get_f32(&self, name: &str) -> Result<ArrayD<f32>> {
        let (e, bytes) = self.entry(name, "f32")?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|_| Error::format(format!("bad shape for '{name}'")))
    }

    pub fn get_u16(&self, name: &str) -> Result<ArrayD<u16>> {
        let (e, bytes) = self.entry(name, "u16")?;
        let vals: Vec<u16> = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|_| Error::format(format!("bad shape for '{name}'")))
    }

    pub fn get_i64(&self, name: &str) -> Result<ArrayD<i64>> {
        let (e, bytes) = self.entry(name, "i64")?;
        let vals: Vec<i64> = bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
            .map_err(|_| Error::format(format!("bad shape for '{name}'")))
    }
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f64" | "i64" => Ok(8),
        "f32" => Ok(4),
        "u16" => Ok(2),
        "u8" => Ok(1),
        other => Err(Error::format(format!("unknown dtype '{other}'"))),
    }
}
