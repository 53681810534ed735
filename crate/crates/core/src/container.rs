//! The `.lhtw` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0       4 bytes   magic "LHTW"
//! 4       u32       container version (1)
//! 8       u64       header length N
//! 16      N bytes   UTF-8 JSON header, right-padded with spaces so 16 + N ≡ 0 (mod 64)
//! 16+N    payload   raw f32 tensors; every offset (relative to payload start) is 64-aligned,
//!                   gaps are zero bytes
//! end-4   u32       CRC32 (IEEE) of the payload region
//! ```
//!
//! The header is `{"version", "config"?, "class_names"?, "metadata", "tensors"}` where
//! `tensors` maps a name to `{"dtype": "F32", "shape": [...], "offset": n}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LHTW";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A fully loaded and checksum-verified container.
#[derive(Clone, Debug)]
pub struct Container {
    pub path: Option<PathBuf>,
    pub header: Header,
    pub checksum: u32,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_bytes(&bytes, path)?;
        c.path = Some(path.to_path_buf());
        Ok(c)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < PREAMBLE + 4 {
            return Err(Error::Container(format!("{} bytes is too short", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&s| s + 4 <= bytes.len())
            .ok_or_else(|| Error::Container(format!("header length {header_len} exceeds file")))?;
        let payload_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[payload_start..payload_end]);
        if stored != computed {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
                stored,
                computed,
            });
        }
        if payload_start % ALIGN != 0 {
            return Err(Error::Container(format!("payload starts at unaligned offset {payload_start}")));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])?;
        if header.version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: header.version,
                expected: VERSION,
            });
        }
        let payload = &bytes[payload_start..payload_end];
        let mut tensors = BTreeMap::new();
        for (name, entry) in &header.tensors {
            if entry.dtype != "F32" {
                return Err(Error::Container(format!("tensor `{name}` has dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if !start.is_multiple_of(ALIGN) || end > payload.len() {
                return Err(Error::Container(format!(
                    "tensor `{name}` spans {start}..{end}, payload is {} bytes",
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Container(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name.clone(), t);
        }
        Ok(Self {
            path: None,
            header,
            checksum: computed,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Like [`get`](Self::get) but also checks the shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn optional(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Shapes recomputed from the loaded tensors.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }
}

/// Accumulates tensors and header fields, then serialises deterministically.
#[derive(Default)]
pub struct ContainerWriter {
    config: Option<serde_json::Value>,
    class_names: Option<Vec<String>>,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, Tensor>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    pub fn tensor(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.tensors.insert(name.into(), t);
        self
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "F32".into(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                },
            );
            offset = align_up(offset + t.len() * 4);
        }
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let mut json = serde_json::to_vec(&header)?;
        let padded = align_up(PREAMBLE + json.len()) - PREAMBLE;
        json.resize(padded, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + padded + offset + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(padded as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let target = payload_start + align_up(out.len() - payload_start);
            out.resize(target, 0);
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}
