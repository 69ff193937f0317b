//! Versioned binary checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` config length and
//! the canonical config text, `u64` record count, then per record `u32` name
//! length, name bytes, `u8` dtype tag, `u32` rank, `u64` extents and the raw
//! values. A trailing `u64` FNV-1a checksum covers every preceding byte.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::{Model, ModelConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RMIXCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Suffixes of the two tensors stored per batch-norm statistics entry.
const MEAN: &str = ".mean";
const VAR: &str = ".var";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let actual = checksum(body);
        if actual != stored {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let n = r.len()?;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.u8()?;
            if tag != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "{name}: unknown dtype tag {tag}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Model {
    /// Parameters and batch-norm statistics, plus `extra` records (optimizer
    /// state and the like), under the model's canonical config text merged
    /// with `extra_config`.
    pub fn to_checkpoint(
        &self,
        extra_config: Option<&KeyValues>,
        extra: Vec<(String, Tensor)>,
    ) -> Checkpoint {
        let mut kv = self.config.to_kv();
        if let Some(more) = extra_config {
            kv.merge(more);
        }
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).clone()))
            .collect();
        for (name, stats) in self.store.stats_entries() {
            let c = stats.mean.len();
            tensors.push((
                format!("{name}{MEAN}"),
                Tensor::from_parts(vec![c], stats.mean.clone()),
            ));
            tensors.push((
                format!("{name}{VAR}"),
                Tensor::from_parts(vec![c], stats.var.clone()),
            ));
        }
        tensors.extend(extra);
        Checkpoint {
            config_text: kv.to_text(),
            tensors,
        }
    }

    /// Rebuild the model described by the checkpoint and load every
    /// parameter. Records not belonging to the model are ignored only if
    /// their names start with one of `extra_prefixes`.
    pub fn from_checkpoint(ckpt: &Checkpoint, extra_prefixes: &[&str]) -> Result<Self> {
        let kv = KeyValues::parse(&ckpt.config_text)?;
        let mut model_kv = KeyValues::default();
        for key in ModelConfig::KEYS {
            if let Some(v) = kv.get_str(key) {
                model_kv.set(key, v);
            }
        }
        let mut model = Model::new(ModelConfig::from_kv(&model_kv)?)?;
        let mut seen = vec![false; model.store.len()];
        let mut stats_seen = 0;
        for (name, t) in &ckpt.tensors {
            if let Some(id) = model.store.find(name) {
                let slot = model.store.get_mut(id);
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
                seen[id.index()] = true;
                continue;
            }
            let stats = [MEAN, VAR]
                .into_iter()
                .find_map(|suffix| name.strip_suffix(suffix).map(|base| (base, suffix)));
            if let Some((base, suffix)) = stats {
                if let Some((_, entry)) = model.store.stats_entries_mut().find(|(n, _)| *n == base)
                {
                    let target = if suffix == MEAN {
                        &mut entry.mean
                    } else {
                        &mut entry.var
                    };
                    if target.len() != t.numel() {
                        return Err(Error::Checkpoint(format!(
                            "{name}: wrong length {}",
                            t.numel()
                        )));
                    }
                    target.copy_from_slice(t.data());
                    stats_seen += 1;
                    continue;
                }
            }
            if !extra_prefixes.iter().any(|p| name.starts_with(p)) {
                return Err(Error::Checkpoint(format!("unexpected record {name:?}")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.store.ids().nth(i).expect("index in range");
            return Err(Error::Checkpoint(format!(
                "missing parameter {:?}",
                model.store.name(id)
            )));
        }
        let expected_stats = 2 * model.store.stats_entries().count();
        if stats_seen != expected_stats {
            return Err(Error::Checkpoint(format!(
                "expected {expected_stats} normalization statistics records, found {stats_seen}"
            )));
        }
        Ok(model)
    }
}
