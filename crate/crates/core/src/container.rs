//! The `CPAK1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CPAK1"                5 bytes magic (the trailing digit is the version)
//! header_len: u32
//! header: JSON           { "kind", "meta", "tensors": [{name, shape, offset, len}] }
//! blobs                  f32 LE, offsets relative to the start of this section
//! crc32: u32             CRC-32 over every preceding byte
//! ```
//!
//! Used for model weights, CAV directions and persisted token tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CPAK1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: usize,
    /// Number of `f32` elements.
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named list of tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Bundle {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(13 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != b"CPAK" {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
            });
        }
        if bytes[4] != MAGIC[4] {
            return Err(Error::VersionMismatch {
                found: String::from_utf8_lossy(&bytes[4..5]).into_owned(),
            });
        }
        let need = |n: usize| {
            if bytes.len() < n {
                Err(Error::Truncated {
                    needed: n,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(9)?;
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        need(9 + hlen + 4)?;
        let header: Header = serde_json::from_slice(&bytes[9..9 + hlen]).map_err(|e| Error::Malformed {
            path: origin.to_path_buf(),
            reason: format!("header: {e}"),
        })?;
        let blob_start = 9 + hlen;
        let blob_len: usize = header.tensors.iter().map(|e| 4 * e.len).sum();
        need(blob_start + blob_len + 4)?;
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = blob_start + e.offset;
            let end = start + 4 * e.len;
            if end > body_end {
                return Err(Error::Truncated {
                    needed: end + 4,
                    found: bytes.len(),
                });
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|_| Error::Malformed {
                path: origin.to_path_buf(),
                reason: format!("tensor `{}` shape/length disagree", e.name),
            })?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Bundle {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bundle {
        let mut b = Bundle::new("test", serde_json::json!({"seed": 3}));
        b.push("a", Tensor::from_vec(vec![1.5, -2.0, f32::MIN_POSITIVE]));
        b.push("b", Tensor::full(&[2, 2], 0.25));
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = sample();
        let back = Bundle::from_bytes(&b.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn distinct_corruption_errors() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("mem");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Bundle::from_bytes(&bad_magic, p), Err(Error::BadMagic { .. })));

        let mut v2 = bytes.clone();
        v2[4] = b'2';
        assert!(matches!(Bundle::from_bytes(&v2, p), Err(Error::VersionMismatch { .. })));

        assert!(matches!(
            Bundle::from_bytes(&bytes[..bytes.len() - 9], p),
            Err(Error::Truncated { .. })
        ));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 6] ^= 0x40;
        assert!(matches!(Bundle::from_bytes(&flipped, p), Err(Error::Checksum { .. })));
    }
}
