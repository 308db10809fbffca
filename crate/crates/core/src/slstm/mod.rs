//! Sentence-state LSTM encoder.
//!
//! A sentence of `n` words is padded with `<s>` and `</s>` and encoded as
//! `n + 2` word states plus `m` sentence-level states. Every recurrent step
//! updates all of them simultaneously from the previous step only:
//!
//! * each word state reads its `2w + 1` neighbours, its own input and the
//!   sentence state, and mixes neighbour cells, its own cell, the sentence
//!   cell and a fresh candidate through a jointly normalised gate family;
//! * each sentence state reads the average word state and mixes all word
//!   cells and its own cell through a jointly normalised forget family.
//!
//! [`infer`] holds a per-token implementation whose word updates can run on
//! several threads; [`graph`] records the same computation for a whole
//! packed batch on a [`Tape`](crate::autodiff::Tape) for training.

pub mod graph;
pub mod infer;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SLstmConfig {
    pub hidden_size: usize,
    pub steps: usize,
    pub window: usize,
    pub sentence_nodes: usize,
    pub input_size: usize,
}

impl Default for SLstmConfig {
    fn default() -> Self {
        Self {
            hidden_size: 300,
            steps: 9,
            window: 1,
            sentence_nodes: 1,
            input_size: 300,
        }
    }
}

impl SLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.input_size == 0 {
            return Err(Error::Config("hidden and input sizes must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one recurrent step is required".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the neighbour window `ξ` in hidden vectors.
    pub fn span(&self) -> usize {
        2 * self.window + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Input,
    Left(usize),
    Right(usize),
    Forget,
    Sentence,
    Output,
    Candidate,
}

impl GateKind {
    pub fn label(&self) -> String {
        match self {
            GateKind::Input => "i".into(),
            GateKind::Left(k) => format!("l{k}"),
            GateKind::Right(k) => format!("r{k}"),
            GateKind::Forget => "f".into(),
            GateKind::Sentence => "s".into(),
            GateKind::Output => "o".into(),
            GateKind::Candidate => "u".into(),
        }
    }
}

/// Gate order used everywhere: `i, l1..lw, r1..rw, f, [s], o, u`. The first
/// `normalised_count` gates form the softmax family.
pub fn gate_layout(window: usize, with_sentence: bool) -> Vec<GateKind> {
    let mut gates = vec![GateKind::Input];
    gates.extend((1..=window).map(GateKind::Left));
    gates.extend((1..=window).map(GateKind::Right));
    gates.push(GateKind::Forget);
    if with_sentence {
        gates.push(GateKind::Sentence);
    }
    gates.push(GateKind::Output);
    gates.push(GateKind::Candidate);
    gates
}

#[derive(Clone, Copy, Debug)]
pub struct WordGateParams {
    pub kind: GateKind,
    /// `d × (2w+1)d`, applied to the neighbour window.
    pub w: ParamId,
    /// `d × input_size`
    pub u: ParamId,
    /// `d × d`, applied to the sentence state; absent without sentence nodes.
    pub v: Option<ParamId>,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SentenceNodeParams {
    pub w_g: ParamId,
    pub u_g: ParamId,
    pub b_g: ParamId,
    pub w_f: ParamId,
    pub u_f: ParamId,
    pub b_f: ParamId,
    pub w_o: ParamId,
    pub u_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct SLstmParams {
    pub config: SLstmConfig,
    pub gates: Vec<WordGateParams>,
    pub nodes: Vec<SentenceNodeParams>,
    pub h0: ParamId,
}

impl SLstmParams {
    /// Registers all encoder parameters under `prefix` in `store`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: SLstmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let with_sentence = config.sentence_nodes > 0;
        let mut gates = Vec::new();
        for kind in gate_layout(config.window, with_sentence) {
            let g = kind.label();
            let w = store.add_glorot(format!("{prefix}.W_{g}"), d, config.span() * d, rng)?;
            let u = store.add_glorot(format!("{prefix}.U_{g}"), d, config.input_size, rng)?;
            let v = if with_sentence {
                Some(store.add_glorot(format!("{prefix}.V_{g}"), d, d, rng)?)
            } else {
                None
            };
            let b = store.add(format!("{prefix}.b_{g}"), Tensor::zeros(&[d]))?;
            gates.push(WordGateParams { kind, w, u, v, b });
        }
        let mut nodes = Vec::new();
        for j in 0..config.sentence_nodes {
            let p = format!("{prefix}.node{j}");
            let mut mat = |name: &str, rng: &mut R| store.add_glorot(format!("{p}.{name}"), d, d, rng);
            let (w_g, u_g) = (mat("W_g", rng)?, mat("U_g", rng)?);
            let (w_f, u_f) = (mat("W_f", rng)?, mat("U_f", rng)?);
            let (w_o, u_o) = (mat("W_o", rng)?, mat("U_o", rng)?);
            nodes.push(SentenceNodeParams {
                w_g,
                u_g,
                b_g: store.add(format!("{p}.b_g"), Tensor::zeros(&[d]))?,
                w_f,
                u_f,
                b_f: store.add(format!("{p}.b_f"), Tensor::zeros(&[d]))?,
                w_o,
                u_o,
                b_o: store.add(format!("{p}.b_o"), Tensor::zeros(&[d]))?,
            });
        }
        let h0 = store.add(format!("{prefix}.h0"), Tensor::uniform(&[d], 0.1, rng))?;
        Ok(Self {
            config,
            gates,
            nodes,
            h0,
        })
    }

    /// Number of gates in the jointly normalised family.
    pub fn normalised_count(&self) -> usize {
        self.gates.len() - 2
    }

    pub fn gate_index(&self, kind: GateKind) -> Option<usize> {
        self.gates.iter().position(|g| g.kind == kind)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for g in &self.gates {
            ids.extend([g.w, g.u]);
            ids.extend(g.v);
            ids.push(g.b);
        }
        for n in &self.nodes {
            ids.extend([n.w_g, n.u_g, n.b_g, n.w_f, n.u_f, n.b_f, n.w_o, n.u_o, n.b_o]);
        }
        ids.push(self.h0);
        ids
    }
}
