//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `GKIECKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the raw little-endian `f64` payload. The header records the model
//! config, the vocabulary charset, free-form metadata and, for every named
//! array, its shape and offset into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autograd::{Mat, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GKIECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    charset: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Model parameters plus any extra named arrays (optimizer state) and
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub charset: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, charset: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            config: model.config().clone(),
            charset: charset.to_string(),
            meta,
            arrays: model
                .params()
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, m)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                    offset,
                };
                offset += m.len();
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            charset: self.charset.clone(),
            meta: self.meta.clone(),
            arrays,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.arrays {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let chunk = payload
                .get(start..start + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("array {:?} truncated", e.name)))?;
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), data)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            arrays.push((e.name, m));
        }
        Ok(Checkpoint {
            config: header.config,
            charset: header.charset,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model, validating every parameter shape against the
    /// config. Optimizer arrays (names starting with `opt.`) are skipped.
    pub fn to_model(&self) -> Result<Model> {
        let mut params = Params::new();
        for (name, m) in &self.arrays {
            if name.starts_with("opt.") {
                continue;
            }
            params.add(name.clone(), m.clone());
        }
        Model::from_parts(self.config.clone(), params)
    }

    pub fn array(&self, name: &str) -> Option<&Mat> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}
