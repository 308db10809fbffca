//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{EncoderKind, HeadKind, ModelConfig, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Rescale every gradient when the global L2 norm exceeds the threshold.
    GlobalNorm,
    /// Clamp each gradient entry to `[-clip, clip]`.
    Value,
}

impl ClipMode {
    pub fn name(&self) -> &'static str {
        match self {
            ClipMode::GlobalNorm => "global",
            ClipMode::Value => "value",
        }
    }
}

impl FromStr for ClipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ClipMode::GlobalNorm),
            "value" => Ok(ClipMode::Value),
            other => Err(Error::Config(format!("unknown clip mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub head: HeadKind,
    pub task: TaskKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub batch_size: usize,
    pub l2: f64,
    pub dropout: f64,
    pub dropout_between_layers: bool,
    pub epochs: usize,
    pub seed: u64,
    pub steps: usize,
    pub window: usize,
    pub nodes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub emb_dim: usize,
    pub attn_size: usize,
    pub fine_tune: bool,
    pub normalize_digits: bool,
    pub workers: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::SLstm,
            head: HeadKind::Softmax,
            task: TaskKind::Classification,
            lr: 0.001,
            lr_decay: 0.97,
            clip_norm: 3.0,
            clip_mode: ClipMode::GlobalNorm,
            batch_size: 10,
            l2: 0.001,
            dropout: 0.5,
            dropout_between_layers: true,
            epochs: 30,
            seed: 1,
            steps: 9,
            window: 1,
            nodes: 1,
            hidden: 300,
            layers: 1,
            emb_dim: 300,
            attn_size: 100,
            fine_tune: true,
            normalize_digits: false,
            workers: 1,
            eval_batch: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "encoder", "head", "task", "lr", "lr_decay", "clip_norm", "clip_mode", "batch_size", "l2", "dropout",
        "dropout_between_layers", "epochs", "seed", "steps", "window", "nodes", "hidden", "layers", "emb_dim",
        "attn_size", "fine_tune", "normalize_digits", "workers", "eval_batch",
    ];

    /// Sets one field from its text form. Keys accept `-` for `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "encoder" => self.encoder = value.parse()?,
            "head" => self.head = value.parse()?,
            "task" => self.task = value.parse()?,
            "lr" => self.lr = parse(&key, value)?,
            "lr_decay" => self.lr_decay = parse(&key, value)?,
            "clip_norm" | "clip" => self.clip_norm = parse(&key, value)?,
            "clip_mode" => self.clip_mode = value.parse()?,
            "batch_size" | "batch" => self.batch_size = parse(&key, value)?,
            "l2" => self.l2 = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "dropout_between_layers" => self.dropout_between_layers = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "window" => self.window = parse(&key, value)?,
            "nodes" => self.nodes = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "layers" => self.layers = parse(&key, value)?,
            "emb_dim" => self.emb_dim = parse(&key, value)?,
            "attn_size" => self.attn_size = parse(&key, value)?,
            "fine_tune" => self.fine_tune = parse(&key, value)?,
            "normalize_digits" => self.normalize_digits = parse(&key, value)?,
            "workers" => self.workers = parse(&key, value)?,
            "eval_batch" => self.eval_batch = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "encoder" => self.encoder.name().to_string(),
            "head" => self.head.name().to_string(),
            "task" => self.task.name().to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "clip_mode" => self.clip_mode.name().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "l2" => self.l2.to_string(),
            "dropout" => self.dropout.to_string(),
            "dropout_between_layers" => self.dropout_between_layers.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "window" => self.window.to_string(),
            "nodes" => self.nodes.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "emb_dim" => self.emb_dim.to_string(),
            "attn_size" => self.attn_size.to_string(),
            "fine_tune" => self.fine_tune.to_string(),
            "normalize_digits" => self.normalize_digits.to_string(),
            "workers" => self.workers.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            _ => return None,
        })
    }

    /// Every field, one `key=value` per line, in [`Self::KEYS`] order. Floats
    /// use the shortest representation that round-trips exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("known key"));
        }
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("clip_norm", self.clip_norm),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps", self.steps),
            ("window", self.window),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("emb_dim", self.emb_dim),
            ("attn_size", self.attn_size),
            ("workers", self.workers),
            ("eval_batch", self.eval_batch),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, labels: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            head: self.head,
            task: self.task,
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            steps: self.steps,
            window: self.window,
            nodes: self.nodes,
            layers: self.layers,
            attn_size: self.attn_size,
            labels,
            fine_tune_embeddings: self.fine_tune,
            dropout_between_layers: self.dropout_between_layers,
        }
    }
}
