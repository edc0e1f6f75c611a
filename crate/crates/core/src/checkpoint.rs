//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCINGCKPT" | u32 version | u64 json_len | json metadata
//! u32 array_count
//! per array, sorted by name:
//!   u32 name_len | name | u8 dtype (1 = f32, 2 = f64) | u32 ndim | u64 dims... | data
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, Fusion};
use crate::error::{Result, ScingError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"SCINGCKPT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

pub const OPTIM_M_PREFIX: &str = "optim.m.";
pub const OPTIM_V_PREFIX: &str = "optim.v.";
/// Frozen second-stage class embeddings.
pub const TARGETS_ARRAY: &str = "targets.text";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
    /// Image-encoder-only export.
    Inference,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Inference => "inference",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    #[serde(rename = "prompt.K")]
    pub classes: usize,
    #[serde(rename = "prompt.L")]
    pub tokens: usize,
    #[serde(rename = "prompt.M")]
    pub fused: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub epochs_total: usize,
    pub optimizer_step: u64,
    /// Seed from which every random stream of the run is derived; together
    /// with `epoch` it fixes the remaining stream positions.
    pub rng_seed: u64,
    pub fusion: Fusion,
    pub prompt: Option<PromptMeta>,
    /// Training identity id of each class index.
    pub class_ids: Vec<usize>,
    pub metrics: BTreeMap<String, f64>,
    pub config: Config,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ScingError::Checkpoint(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u64(&mut buf, json.len() as u64);
        buf.extend_from_slice(&json);
        put_u32(&mut buf, self.arrays.len() as u32);
        for (name, t) in &self.arrays {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F64);
            put_u32(&mut buf, 2);
            put_u64(&mut buf, t.rows() as u64);
            put_u64(&mut buf, t.cols() as u64);
            for v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(ScingError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(ScingError::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let json_len = c.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(c.take(json_len, "metadata")?)
            .map_err(|e| ScingError::Checkpoint(format!("metadata: {e}")))?;
        let count = c.u32("array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "array name")?)
                .map_err(|_| ScingError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let dtype = c.u8(&name)?;
            let ndim = c.u32(&name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(c.u64(&name)? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => {
                    return Err(ScingError::Checkpoint(format!(
                        "array {name} has {ndim} dimensions"
                    )))
                }
            };
            let n = rows * cols;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => c
                    .take(n * 8, &name)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => c
                    .take(n * 4, &name)?
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                    .collect(),
                other => {
                    return Err(ScingError::Checkpoint(format!(
                        "array {name} has unknown dtype {other}"
                    )))
                }
            };
            arrays.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        if c.pos != bytes.len() {
            return Err(ScingError::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ScingError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| ScingError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| ScingError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ScingError::Checkpoint(msg) => {
                ScingError::Checkpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Arrays with the given name prefix.
    pub fn arrays_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Model parameters only: no optimizer moments or cached targets.
    pub fn model_arrays(&self) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("targets."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.model_arrays().values().map(Tensor::len).sum()
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

/// SHA-256 of the named arrays with the given prefixes, in name order.
pub fn arrays_digest<'a>(arrays: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in arrays {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    to_hex(&h.finalize())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
