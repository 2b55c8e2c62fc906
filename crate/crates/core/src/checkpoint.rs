//! Named-tensor archive with a JSON manifest.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPCK" u32 version
//! u64 manifest_len, manifest JSON, 32-byte SHA-256 of the manifest
//! u32 entry count, then per entry:
//!   u32 name_len, name, u8 dtype (0 = f64), u32 ndim, u64 dims…,
//!   f64 data…, 32-byte SHA-256 of the entry from name_len on
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Models};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Seed of the initialization the parameters descend from.
    pub seed: Option<u64>,
    /// Training stages applied, in order.
    #[serde(default)]
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub manifest: Manifest,
    pub params: ParamStore,
}

impl CheckpointBundle {
    pub fn new(config: ModelConfig, params: ParamStore, seed: Option<u64>) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config,
                seed,
                stages: Vec::new(),
            },
            params,
        }
    }

    pub fn from_models(models: &Models, seed: Option<u64>) -> Self {
        Self::new(models.config.clone(), models.params.clone(), seed)
    }

    /// Validates the parameters against the manifest's configuration.
    pub fn into_models(self) -> Result<Models> {
        Models::from_params(self.manifest.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.manifest.format_version.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&Sha256::digest(&manifest));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let start = out.len();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let digest = Sha256::digest(&out[start..]);
            out.extend_from_slice(&digest);
        }
        Ok(out)
    }

    /// Parses a whole archive; nothing is returned unless every entry is
    /// intact.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = "header";
        if r.take(4, header)? != MAGIC {
            return Err(corrupt(header, "not a checkpoint file"));
        }
        let version = r.u32(header)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.len_u64("manifest")?;
        let raw = r.take(len, "manifest")?;
        if r.take(DIGEST, "manifest")? != Sha256::digest(raw).as_slice() {
            return Err(corrupt("manifest", "checksum mismatch"));
        }
        let manifest: Manifest =
            serde_json::from_slice(raw).map_err(|e| corrupt("manifest", e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("entry table")?;
        let mut params = ParamStore::default();
        for i in 0..count {
            let placeholder = format!("#{i}");
            let start = r.pos;
            let name_len = r.len_u32(&placeholder)?;
            let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
                .map_err(|_| corrupt(&placeholder, "name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1, &name)?[0];
            if dtype != DTYPE_F64 {
                return Err(corrupt(&name, format!("unknown dtype {dtype}")));
            }
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len_u64(&name)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(&name, "shape overflows"))?;
            let data: Vec<f64> = r
                .take(numel, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let end = r.pos;
            if r.take(DIGEST, &name)? != Sha256::digest(&bytes[start..end]).as_slice() {
                return Err(corrupt(&name, "checksum mismatch"));
            }
            if params.get(&name).is_some() {
                return Err(corrupt(&name, "duplicate entry"));
            }
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&name, e.to_string()))?;
            params.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailer", "unexpected bytes after the last entry"));
        }
        Ok(Self { manifest, params })
    }
}

fn corrupt(entry: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        entry: entry.to_string(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(entry, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, entry)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, entry: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, entry)?.try_into().expect("8 bytes"),
        ))
    }

    fn len_u32(&mut self, entry: &str) -> Result<usize> {
        let v = self.u32(entry)? as u64;
        self.len(v, entry)
    }

    fn len_u64(&mut self, entry: &str) -> Result<usize> {
        let v = self.u64(entry)?;
        self.len(v, entry)
    }

    fn len(&self, v: u64, entry: &str) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| corrupt(entry, "length exceeds file size"))
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointBundle> {
    CheckpointBundle::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and builds validated models from it.
pub fn load_models(path: impl AsRef<Path>) -> Result<Models> {
    load_checkpoint(path)?.into_models()
}
