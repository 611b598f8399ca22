//! Binary container for named `f32` tensors plus a JSON header.
//!
//! Layout: the magic bytes `JMDF`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then the raw
//! little-endian tensor data in header order.

use std::path::Path;

use jamodiff_tensor::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JMDF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    /// What the file holds, e.g. `checkpoint`; checked on load.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array<f32>)>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, a)| TensorEntry { name: n.clone(), shape: a.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = self.tensors.iter().map(|(_, a)| a.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.tensors {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.kind != expected_kind {
            return Err(Error::Format(format!("expected a {expected_kind} file, found {}", header.kind)));
        }
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| fail("truncated tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((entry.name, Array::new(entry.shape, data)));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes after tensor data"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn read(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, expected_kind)
    }

    pub fn tensor(&self, name: &str) -> Option<&Array<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}
