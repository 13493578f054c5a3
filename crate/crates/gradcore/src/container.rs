//! Binary container shared by checkpoints, assets and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] | version: u32 | meta_len: u64 | meta: JSON (meta_len bytes) | blobs
//! ```
//!
//! The JSON block lists every blob's name, dtype and shape plus a free-form
//! `extra` object. Blob payloads follow in name-sorted order as raw
//! little-endian values.

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl BlobData {
    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::F64(_) => "f64",
            BlobData::U32(_) => "u32",
            BlobData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U32(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            BlobData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read(dtype: &str, len: usize, bytes: &[u8]) -> Result<(Self, usize)> {
        let width = match dtype {
            "f32" | "u32" => 4,
            "f64" => 8,
            "u8" => 1,
            other => return Err(GradError::Container(format!("unknown dtype `{other}`"))),
        };
        let need = width * len;
        if bytes.len() < need {
            return Err(GradError::Container("truncated blob payload".into()));
        }
        let raw = &bytes[..need];
        let data = match dtype {
            "f32" => BlobData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "f64" => BlobData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "u32" => BlobData::U32(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => BlobData::U8(raw.to_vec()),
        };
        Ok((data, need))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    blobs: Vec<BlobHeader>,
    extra: serde_json::Value,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub extra: serde_json::Value,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn new(extra: serde_json::Value) -> Self {
        Container {
            extra,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: BlobData) {
        self.blobs.push(Blob {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let mut blobs: Vec<&Blob> = self.blobs.iter().collect();
        blobs.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in blobs.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(GradError::DuplicateParam(pair[0].name.clone()));
            }
        }
        for b in &blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(GradError::Container(format!(
                    "blob `{}` shape/data mismatch",
                    b.name
                )));
            }
        }
        let header = Header {
            blobs: blobs
                .iter()
                .map(|b| BlobHeader {
                    name: b.name.clone(),
                    dtype: b.data.dtype().to_string(),
                    shape: b.shape.clone(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + meta.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for b in blobs {
            b.data.write(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != magic {
            return Err(GradError::Container(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(GradError::Container(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta = bytes
            .get(20..20 + meta_len)
            .ok_or_else(|| GradError::Container("truncated metadata".into()))?;
        let header: Header = serde_json::from_slice(meta)?;
        let mut offset = 20 + meta_len;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for h in header.blobs {
            let len = h.shape.iter().product();
            let (data, used) = BlobData::read(&h.dtype, len, &bytes[offset..])?;
            offset += used;
            blobs.push(Blob {
                name: h.name,
                shape: h.shape,
                data,
            });
        }
        if offset != bytes.len() {
            return Err(GradError::Container("trailing bytes after blobs".into()));
        }
        Ok(Container {
            extra: header.extra,
            blobs,
        })
    }

    pub fn write_file(&self, magic: &[u8; 8], path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic)?)?;
        Ok(())
    }

    pub fn read_file(magic: &[u8; 8], path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(magic, &std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_magic() {
        let c = Container::new(serde_json::json!({}));
        let bytes = c.to_bytes(b"AAAAAAAA").unwrap();
        assert!(Container::from_bytes(b"BBBBBBBB", &bytes).is_err());
    }

    #[test]
    fn mixed_dtypes_round_trip_bytes() {
        let mut c = Container::new(serde_json::json!({"k": 1.25, "a": [1, 2]}));
        c.push("z", vec![2], BlobData::F64(vec![1.0, -0.0]));
        c.push("a", vec![3], BlobData::U32(vec![1, 2, 3]));
        c.push("m", vec![2, 2], BlobData::U8(vec![1, 0, 0, 1]));
        c.push("f", vec![1], BlobData::F32(vec![f32::MIN_POSITIVE]));
        let bytes = c.to_bytes(b"TESTTEST").unwrap();
        let back = Container::from_bytes(b"TESTTEST", &bytes).unwrap();
        assert_eq!(back.to_bytes(b"TESTTEST").unwrap(), bytes);
        assert_eq!(back.get("a").unwrap().data, BlobData::U32(vec![1, 2, 3]));
        // sorted on write
        let names: Vec<_> = back.blobs.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["a", "f", "m", "z"]);
    }

    #[test]
    fn truncated_payload_is_error() {
        let mut c = Container::new(serde_json::Value::Null);
        c.push("x", vec![4], BlobData::F64(vec![0.0; 4]));
        let bytes = c.to_bytes(b"TESTTEST").unwrap();
        assert!(Container::from_bytes(b"TESTTEST", &bytes[..bytes.len() - 1]).is_err());
    }
}
