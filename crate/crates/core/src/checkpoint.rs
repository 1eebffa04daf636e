//! Binary tensor container (checkpoints and embedding dumps) with JSON sidecars.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CIRL" | version u32 | count u32 |
//!   count x ( name_len u16 | name utf-8 | rank u8 | dims u64 x rank | data f32 x prod(dims) ) |
//! crc32 u32   (over every preceding byte)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{EpochLog, TrainConfig};

pub const MAGIC: &[u8; 4] = b"CIRL";
pub const VERSION: u32 = 1;

/// Serializes named tensors. Values are stored as `f32`.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n as usize),
            [a, b] => (a as usize, b as usize),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= payload.len()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape")))?;
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes before CRC".into()));
    }
    Ok(out)
}

/// Configuration and training history stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub log: Vec<EpochLog>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(model: &Model, train: Option<&TrainConfig>, log: &[EpochLog], path: &Path) -> Result<()> {
    fs::write(path, encode_tensors(model.params().iter()))?;
    let side = Sidecar {
        schema_version: VERSION,
        model: model.config().clone(),
        train: train.cloned(),
        log: log.to_vec(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, Sidecar)> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.schema_version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema {}", side.schema_version)));
    }
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(&fs::read(path)?)? {
        store.insert(name, t);
    }
    let model = Model::from_params(side.model.clone(), store)?;
    Ok((model, side))
}

/// Ids accompanying an embedding dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingIds {
    pub role: crate::encoder::Role,
    /// Candidate ids for targets; triplet indices within `split` for queries.
    pub ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<crate::synthcorpus::Split>,
    /// Ground-truth candidate per query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}

pub fn save_embeddings(path: &Path, embeddings: &Tensor, ids: &EmbeddingIds) -> Result<()> {
    if embeddings.rows != ids.ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", ids.ids.len()),
            got: format!("{} rows", embeddings.rows),
        });
    }
    fs::write(path, encode_tensors([("embeddings", embeddings)]))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(ids)?)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(Tensor, EmbeddingIds)> {
    let ids: EmbeddingIds = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut tensors = decode_tensors(&fs::read(path)?)?;
    match tensors.pop() {
        Some((name, t)) if name == "embeddings" && tensors.is_empty() => {
            if t.rows != ids.ids.len() {
                return Err(Error::Checkpoint("embedding rows do not match the id list".into()));
            }
            Ok((t, ids))
        }
        _ => Err(Error::Checkpoint("expected a single tensor named \"embeddings\"".into())),
    }
}
