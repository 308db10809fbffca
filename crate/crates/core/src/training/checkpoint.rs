//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLSTMCKPT" | u32 version
//! u32 len | config text (key=value lines)
//! u32 len | metadata text (epoch, vocab_hash, adam_step)
//! u32 count | count × (u32 len | utf-8)        vocabulary
//! u32 count | count × (u32 len | utf-8)        label names
//! u32 count | count × tensor
//! tensor = u32 name len | name | u32 rank | rank × u64 extent | f64 payload
//! ```
//!
//! Parameters are stored under their own names, Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AdamState, TrainConfig};
use crate::autodiff::ParamStore;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"SLSTMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: u64,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub adam_step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        epoch: u64,
        vocab: &Vocab,
        labels: &[String],
        store: &ParamStore,
        adam: &AdamState,
    ) -> Self {
        let named = |ts: &[Tensor]| -> Vec<(String, Tensor)> {
            store.iter().zip(ts).map(|(p, t)| (p.name.clone(), t.clone())).collect()
        };
        Self {
            config: config.clone(),
            epoch,
            vocab_hash: vocab.hash(),
            vocab: vocab.tokens().to_vec(),
            labels: labels.to_vec(),
            adam_step: adam.step,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam_m: named(&adam.m),
            adam_v: named(&adam.v),
        }
    }

    /// Writes parameter values into `store` and returns the optimiser state.
    /// Any name or shape disagreement is a version error.
    pub fn restore(&self, store: &mut ParamStore) -> Result<AdamState> {
        if self.params.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        store.load_values(&self.params)?;
        let order = |named: &[(String, Tensor)]| -> Result<Vec<Tensor>> {
            store
                .iter()
                .map(|p| {
                    named
                        .iter()
                        .find(|(n, _)| *n == p.name)
                        .filter(|(_, t)| t.shape() == p.value.shape())
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::Version(format!("missing or misshapen moments for {}", p.name)))
                })
                .collect()
        };
        Ok(AdamState {
            m: order(&self.adam_m)?,
            v: order(&self.adam_v)?,
            step: self.adam_step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_kv());
        let meta = format!(
            "epoch={}\nvocab_hash={}\nadam_step={}\n",
            self.epoch, self.vocab_hash, self.adam_step
        );
        put_str(&mut out, &meta);
        for list in [&self.vocab, &self.labels] {
            put_u32(&mut out, list.len());
            for s in list {
                put_str(&mut out, s);
            }
        }
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(self.adam_m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)))
            .chain(self.adam_v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)))
            .collect();
        put_u32(&mut out, tensors.len());
        for (name, t) in tensors {
            put_str(&mut out, &name);
            put_u32(&mut out, t.rank());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Version("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let config = TrainConfig::from_kv(&r.string()?)?;
        let meta = r.string()?;
        let field = |key: &str| -> Result<String> {
            meta.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|l| l.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| Error::Version(format!("checkpoint metadata lacks {key}")))
        };
        let number = |key: &str| -> Result<u64> {
            field(key)?
                .parse()
                .map_err(|_| Error::Version(format!("bad {key} in checkpoint metadata")))
        };
        let epoch = number("epoch")?;
        let adam_step = number("adam_step")?;
        let vocab_hash = field("vocab_hash")?;
        let mut lists = Vec::new();
        for _ in 0..2 {
            let n = r.u32()? as usize;
            lists.push((0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?);
        }
        let labels = lists.pop().expect("two lists");
        let vocab = lists.pop().expect("two lists");
        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Version("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Version(format!("tensor {name}: {e}")))?;
            if let Some(n) = name.strip_prefix("adam.m/") {
                adam_m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                adam_v.push((n.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Version(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            vocab_hash,
            vocab,
            labels,
            adam_step,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(u32::try_from(n).expect("length fits in u32")).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Version("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Version("invalid utf-8 in checkpoint".into()))
    }
}
