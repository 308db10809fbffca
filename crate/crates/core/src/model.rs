//! Embedding layer, encoder and task head wired together for packed
//! batches.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Segments, Tape, Var};
use crate::bilstm::{self, BiLstmParams};
use crate::error::{arg, Error, Result};
use crate::heads::{argmax, AttentionParams, ClassifierParams, CrfParams};
use crate::slstm::{self, SLstmConfig, SLstmParams};
use crate::tensor::Tensor;
use crate::training::{derive_seed, dropout_mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    SLstm,
    BiLstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Sentence softmax for classification, per-token softmax for tagging.
    Softmax,
    /// Additive attention pooling followed by a softmax; classification only.
    Attention,
    /// Linear-chain CRF; tagging only.
    Crf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Tagging,
}

macro_rules! names {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn name(&self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($t)
                    ))),
                }
            }
        }
    };
}

names!(EncoderKind { SLstm => "slstm", BiLstm => "bilstm" });
names!(HeadKind { Softmax => "softmax", Attention => "attn", Crf => "crf" });
names!(TaskKind { Classification => "classification", Tagging => "tagging" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub head: HeadKind,
    pub task: TaskKind,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub window: usize,
    pub nodes: usize,
    pub layers: usize,
    pub attn_size: usize,
    pub labels: usize,
    pub fine_tune_embeddings: bool,
    /// Apply the embedding dropout rate between stacked BiLSTM layers too.
    pub dropout_between_layers: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.task, self.head) {
            (TaskKind::Classification, HeadKind::Crf) => {
                return Err(Error::Config("the CRF head is for tagging".into()))
            }
            (TaskKind::Tagging, HeadKind::Attention) => {
                return Err(Error::Config("attention pooling is for classification".into()))
            }
            _ => {}
        }
        if self.vocab_size == 0 || self.emb_dim == 0 || self.hidden == 0 || self.labels == 0 {
            return Err(Error::Config("vocabulary, embedding, hidden and label sizes must be positive".into()));
        }
        if self.encoder == EncoderKind::BiLstm && self.layers == 0 {
            return Err(Error::Config("at least one BiLSTM layer is required".into()));
        }
        if self.head == HeadKind::Attention && self.attn_size == 0 {
            return Err(Error::Config("attention size must be positive".into()));
        }
        Ok(())
    }

    pub fn slstm(&self) -> SLstmConfig {
        SLstmConfig {
            hidden_size: self.hidden,
            steps: self.steps,
            window: self.window,
            sentence_nodes: self.nodes,
            input_size: self.emb_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// One tag per word, boundary tokens excluded.
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    /// Token ids including both boundary tokens.
    pub tokens: Vec<usize>,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    SLstm(SLstmParams),
    BiLstm(Vec<BiLstmParams>),
}

#[derive(Clone, Debug)]
pub enum Head {
    Softmax(ClassifierParams),
    Attention(AttentionParams, ClassifierParams),
    Crf(CrfParams),
}

/// Dropout applied during a training forward pass.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    /// One seed per example of the batch.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub word_h: Var,
    pub g: Var,
    pub segs: Arc<Segments>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: ParamId,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    /// Registers every parameter. `pretrained` initialises the embedding
    /// matrix; otherwise rows are uniform in `(-0.1, 0.1)` with `<pad>` zero.
    pub fn register<R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
        pretrained: Option<&Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let table = match pretrained {
            Some(t) => {
                if t.shape() != [config.vocab_size, config.emb_dim] {
                    return arg(format!(
                        "pretrained embeddings of shape {:?} for vocabulary {} and dimension {}",
                        t.shape(),
                        config.vocab_size,
                        config.emb_dim
                    ));
                }
                t.clone()
            }
            None => {
                let mut t = Tensor::uniform(&[config.vocab_size, config.emb_dim], 0.1, rng);
                t.row_mut(crate::data::PAD).fill(0.0);
                t
            }
        };
        let embed = store.add("embed", table)?;
        let (encoder, width) = match config.encoder {
            EncoderKind::SLstm => {
                let p = SLstmParams::register(store, "slstm", config.slstm(), rng)?;
                (Encoder::SLstm(p), config.hidden)
            }
            EncoderKind::BiLstm => {
                let layers = bilstm::register_stack(store, "bilstm", config.emb_dim, config.hidden, config.layers, rng)?;
                (Encoder::BiLstm(layers), 2 * config.hidden)
            }
        };
        let head = match config.head {
            HeadKind::Softmax => Head::Softmax(ClassifierParams::register(store, "out", width, config.labels, rng)?),
            HeadKind::Attention => Head::Attention(
                AttentionParams::register(store, "attn", width, config.attn_size, rng)?,
                ClassifierParams::register(store, "out", width, config.labels, rng)?,
            ),
            HeadKind::Crf => Head::Crf(CrfParams::register(store, "crf", width, config.labels, rng)?),
        };
        Ok(Self {
            config,
            embed,
            encoder,
            head,
        })
    }

    /// Parameters updated by the optimiser.
    pub fn trainable(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| self.config.fine_tune_embeddings || id != self.embed)
            .collect()
    }

    fn check(&self, batch: &[&Instance]) -> Result<()> {
        if batch.is_empty() {
            return arg("empty batch");
        }
        for inst in batch {
            if inst.tokens.len() < 2 {
                return arg("instance without boundary tokens");
            }
            if let Some(&bad) = inst.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return arg(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size));
            }
            match (&inst.target, self.config.task) {
                (Target::Class(y), TaskKind::Classification) if *y < self.config.labels => {}
                (Target::Tags(t), TaskKind::Tagging)
                    if t.len() + 2 == inst.tokens.len() && t.iter().all(|&y| y < self.config.labels) => {}
                (t, task) => return arg(format!("target {t:?} does not fit a {task:?} model")),
            }
        }
        Ok(())
    }

    /// Embeds and encodes a batch.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Instance], dropout: Option<&Dropout>) -> Result<Encoded> {
        self.check(batch)?;
        let lens: Vec<usize> = batch.iter().map(|i| i.tokens.len()).collect();
        let segs = Arc::new(Segments::from_lengths(&lens)?);
        let ids: Vec<usize> = batch.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let table = if self.config.fine_tune_embeddings {
            tape.param(store, self.embed)
        } else {
            tape.constant(store.value(self.embed).clone())
        };
        let mut x = tape.gather_rows(table, ids.into())?;
        let active = dropout.filter(|d| d.rate > 0.0);
        if let Some(d) = active {
            if d.seeds.len() != batch.len() {
                return arg("one dropout seed per example is required");
            }
            x = apply_mask(tape, x, &lens, d, 0)?;
        }
        let (word_h, g) = match &self.encoder {
            Encoder::SLstm(p) => {
                let out = slstm::graph::forward(tape, store, p, x, &segs)?;
                (out.word_h, out.g)
            }
            Encoder::BiLstm(layers) => {
                let between = |tape: &mut Tape, h: Var, k: usize| match active {
                    Some(d) if self.config.dropout_between_layers => apply_mask(tape, h, &lens, d, k as u64 + 1),
                    _ => Ok(h),
                };
                let out = bilstm::graph::stack_forward(tape, store, layers, x, &segs, between)?;
                (out.word_h, out.g)
            }
        };
        Ok(Encoded { word_h, g, segs })
    }

    fn token_rows(&self, tape: &mut Tape, enc: &Encoded) -> Result<(Var, Arc<Segments>)> {
        let (segs, rows) = enc.segs.interior()?;
        let h = tape.gather_rows(enc.word_h, rows.into())?;
        Ok((h, Arc::new(segs)))
    }

    /// Summed negative log-likelihood of the batch targets.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, enc: &Encoded, batch: &[&Instance]) -> Result<Var> {
        match (&self.head, self.config.task) {
            (Head::Softmax(c), TaskKind::Classification) => {
                let z = c.logits(tape, store, enc.g)?;
                tape.cross_entropy_sum(z, &class_labels(batch))
            }
            (Head::Attention(a, c), _) => {
                let pooled = a.pool(tape, store, enc.word_h, &enc.segs)?;
                let z = c.logits(tape, store, pooled)?;
                tape.cross_entropy_sum(z, &class_labels(batch))
            }
            (Head::Softmax(c), TaskKind::Tagging) => {
                let (h, _) = self.token_rows(tape, enc)?;
                let z = c.logits(tape, store, h)?;
                let tags: Vec<usize> = tag_labels(batch).into_iter().flatten().collect();
                tape.cross_entropy_sum(z, &tags)
            }
            (Head::Crf(crf), _) => {
                let (h, segs) = self.token_rows(tape, enc)?;
                crf.nll(tape, store, h, &segs, &tag_labels(batch))
            }
        }
    }

    /// Predicted targets, one per instance.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, enc: &Encoded) -> Result<Vec<Target>> {
        let classes = |tape: &Tape, z: Var| -> Vec<Target> {
            let t = tape.value(z);
            (0..t.rows()).map(|r| Target::Class(argmax(t.row(r)))).collect()
        };
        match (&self.head, self.config.task) {
            (Head::Softmax(c), TaskKind::Classification) => {
                let z = c.logits(tape, store, enc.g)?;
                Ok(classes(tape, z))
            }
            (Head::Attention(a, c), _) => {
                let pooled = a.pool(tape, store, enc.word_h, &enc.segs)?;
                let z = c.logits(tape, store, pooled)?;
                Ok(classes(tape, z))
            }
            (Head::Softmax(c), TaskKind::Tagging) => {
                let (h, segs) = self.token_rows(tape, enc)?;
                let z = c.logits(tape, store, h)?;
                let t = tape.value(z);
                Ok((0..segs.count())
                    .map(|b| Target::Tags(segs.range(b).map(|r| argmax(t.row(r))).collect()))
                    .collect())
            }
            (Head::Crf(crf), _) => {
                let (h, segs) = self.token_rows(tape, enc)?;
                Ok(crf.decode_batch(tape, store, h, &segs)?.into_iter().map(Target::Tags).collect())
            }
        }
    }

    /// Predictions for any number of instances, `batch` at a time.
    pub fn predict_all(&self, store: &ParamStore, data: &[Instance], batch: usize) -> Result<Vec<Target>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(batch.max(1)) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            let mut tape = Tape::new();
            let enc = self.encode(&mut tape, store, &refs, None)?;
            out.extend(self.predict(&mut tape, store, &enc)?);
        }
        Ok(out)
    }
}

fn class_labels(batch: &[&Instance]) -> Vec<usize> {
    batch
        .iter()
        .map(|i| match i.target {
            Target::Class(y) => y,
            Target::Tags(_) => unreachable!("checked by Model::check"),
        })
        .collect()
}

fn tag_labels(batch: &[&Instance]) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|i| match &i.target {
            Target::Tags(t) => t.clone(),
            Target::Class(_) => unreachable!("checked by Model::check"),
        })
        .collect()
}

/// Multiplies rows of `x` by per-example inverted-dropout masks.
fn apply_mask(tape: &mut Tape, x: Var, lens: &[usize], d: &Dropout, salt: u64) -> Result<Var> {
    let cols = tape.value(x).cols();
    let mut data = Vec::with_capacity(tape.value(x).len());
    for (&len, &seed) in lens.iter().zip(&d.seeds) {
        let seed = if salt == 0 { seed } else { derive_seed(&[seed, salt]) };
        data.extend(dropout_mask(&[len, cols], d.rate, seed)?.into_data());
    }
    let rows = lens.iter().sum();
    let mask = tape.constant(Tensor::matrix(rows, cols, data)?);
    tape.mul(x, mask)
}

impl From<crate::data::ClassificationExample> for Instance {
    fn from(e: crate::data::ClassificationExample) -> Self {
        Self {
            tokens: e.tokens,
            target: Target::Class(e.label),
        }
    }
}

impl From<crate::data::TaggingExample> for Instance {
    fn from(e: crate::data::TaggingExample) -> Self {
        Self {
            tokens: e.tokens,
            target: Target::Tags(e.tags),
        }
    }
}
