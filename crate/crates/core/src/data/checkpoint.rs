//! `VXC1` container: magic, u32 LE header length, JSON header, f32 payload.
//!
//! The header lists every array by name, shape and byte offset into the
//! payload, plus a free-form `meta` object. Model-specific naming lives with
//! the encoder; this layer only moves named arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{f32s_to_le_bytes, le_bytes_to_f32s};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl CheckpointFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Array `name` with the expected shape, or a missing-array/shape error.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))?;
        if a.shape != shape {
            return Err(Error::Invalid(format!(
                "array `{name}` has shape {:?}, expected {shape:?}",
                a.shape
            )));
        }
        Ok(&a.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Invalid(format!(
                    "array `{}` data disagrees with its shape",
                    a.name
                )));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
            });
            offset += a.data.len() * 4;
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            out.extend_from_slice(&f32s_to_le_bytes(&a.data));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format(origin, "unknown magic (expected VXC1)"));
        }
        let hlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let payload_start = 8 + hlen;
        if bytes.len() < payload_start {
            return Err(Error::format(origin, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| Error::format(origin, e.to_string()))?;
        if header.version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {}", header.version),
            ));
        }
        let payload = &bytes[payload_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            if end > payload.len() {
                return Err(Error::format(
                    origin,
                    format!("array `{}` runs past the payload", e.name),
                ));
            }
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: le_bytes_to_f32s(&payload[e.offset..end]),
            });
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> CheckpointFile {
        let mut c = CheckpointFile::new(json!({"kind": "test", "layers": 2}));
        c.push("a.W", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-38]);
        c.push("a.b", &[2], vec![f32::MAX, f32::MIN_POSITIVE]);
        c.push("empty", &[0, 4], vec![]);
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.vxc1"), dir.path().join("b.vxc1"));
        let c = sample();
        c.save(&p1).unwrap();
        let back = CheckpointFile::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            back.require("a.b", &[2]).unwrap()[0].to_bits(),
            f32::MAX.to_bits()
        );
        assert_eq!(
            back.require("a.W", &[2, 3]).unwrap()[4].to_bits(),
            (-0.0f32).to_bits()
        );
    }

    #[test]
    fn missing_array_is_named() {
        let c = sample();
        match c.require("head.W", &[1]) {
            Err(Error::MissingArray(n)) => assert_eq!(n, "head.W"),
            other => panic!("{other:?}"),
        }
        assert!(c.require("a.b", &[3]).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let p = Path::new("x.vxc1");
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(CheckpointFile::from_bytes(&bytes, p)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let text = String::from_utf8_lossy(&sample().to_bytes().unwrap())
            .replace("\"version\":1", "\"version\":9");
        assert!(CheckpointFile::from_bytes(text.as_bytes(), p).is_err());
    }
}
