//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NUTRCKPT"  u32 version  u64 metadata_len  metadata (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u8 dtype(1 = f64)  u32 rank  u64 dims[rank]  f64 payload[∏dims]
//! ```
//!
//! Metadata lists the parameters in record order with their group and
//! trainable flag; shapes live only in the records.

use std::path::Path;

use nutricast_core::classifier::{HeadConfig, NutrientModel, Variant};
use nutricast_core::data::{BinningSpec, SplitAssignment};
use nutricast_core::encoders::{ModelConfig, Preprocessing, Vocabulary};
use nutricast_core::training::{Checkpoint, LossRecord, TrainConfig, CHECKPOINT_VERSION};
use nutricast_core::{ParamGroup, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 8] = b"NUTRCKPT";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// The JSON block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub model_config: ModelConfig,
    pub variant: Variant,
    pub heads: Vec<HeadConfig>,
    pub params: Vec<ParamMeta>,
    pub vocabulary: Vocabulary,
    pub binning: Vec<BinningSpec>,
    pub preprocessing: Preprocessing,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    pub split: Option<SplitAssignment>,
}

impl Metadata {
    pub fn of(ckpt: &Checkpoint) -> Self {
        Self {
            model_config: ckpt.model.config.clone(),
            variant: ckpt.model.variant,
            heads: ckpt.model.heads.clone(),
            params: ckpt
                .model
                .params
                .iter()
                .map(|(_, p)| ParamMeta {
                    name: p.name.clone(),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
            vocabulary: ckpt.vocabulary.clone(),
            binning: ckpt.binning.clone(),
            preprocessing: ckpt.preprocessing.clone(),
            train_config: ckpt.train_config.clone(),
            seed: ckpt.seed,
            history: ckpt.history.clone(),
            split: ckpt.split.clone(),
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata::of(ckpt)).map_err(|e| Error::Usage(format!("metadata: {e}")))?;
    let mut out = Vec::with_capacity(64 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.model.params.len() as u32).to_le_bytes());
    for (_, p) in ckpt.model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            )),
        }
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

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.fail(at, format!("{what} {v} does not fit in memory")))
    }
}

/// Parse a checkpoint. `path` only labels diagnostics.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.fail(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(8, format!("unsupported checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let meta_len = r.len("metadata length")?;
    let meta_at = r.pos;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| r.fail(meta_at + e.column().saturating_sub(1), format!("metadata: {e}")))?;
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != meta.params.len() {
        return Err(r.fail(count_at, format!("{count} tensor records but metadata lists {}", meta.params.len())));
    }
    let mut params = ParamStore::new();
    for pm in &meta.params {
        let rec_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.fail(rec_at + 4, "tensor name is not UTF-8"))?;
        if name != pm.name {
            return Err(r.fail(rec_at, format!("tensor `{name}` where metadata expects `{}`", pm.name)));
        }
        let dtype_at = r.pos;
        if r.u8("dtype")? != DTYPE_F64 {
            return Err(r.fail(dtype_at, format!("tensor `{name}` has an unsupported dtype")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload_at = r.pos;
        let count = count
            .and_then(|c| c.checked_mul(8).map(|_| c))
            .ok_or_else(|| r.fail(payload_at, format!("tensor `{name}` is too large")))?;
        let payload = r.take(count * 8, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| r.fail(rec_at, format!("tensor `{name}`: {e}")))?;
        params
            .insert(name, tensor, pm.trainable, pm.group)
            .map_err(|e| r.fail(rec_at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = NutrientModel {
        config: meta.model_config,
        variant: meta.variant,
        heads: meta.heads,
        params,
    };
    model.validate().map_err(|e| r.fail(meta_at, format!("inconsistent model: {e}")))?;
    Ok(Checkpoint {
        version,
        model,
        vocabulary: meta.vocabulary,
        binning: meta.binning,
        preprocessing: meta.preprocessing,
        train_config: meta.train_config,
        seed: meta.seed,
        history: meta.history,
        split: meta.split,
    })
}

/// Write the checkpoint and return the hex SHA-256 of the written bytes.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = encode_checkpoint(ckpt)?;
    write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Load a checkpoint and its hex SHA-256.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = read(path)?;
    Ok((decode_checkpoint(&bytes, path)?, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}
