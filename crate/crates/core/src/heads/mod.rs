//! Task heads on top of an encoder: softmax classifier, additive attention
//! pooling, per-token softmax and a linear-chain CRF.

pub mod crf;

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Segments, Tape, Var};
use crate::error::{arg, Result};
use crate::tensor::{softmax_in_place, Tensor};

pub use crf::{CrfParams, CrfScores};

/// Affine map followed by a softmax, used both for sentence classification
/// and per-token tagging.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    /// `classes × input`
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
    pub input_size: usize,
}

impl ClassifierParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || input_size == 0 {
            return arg("classifier needs at least one class and a positive input size");
        }
        Ok(Self {
            w: store.add_glorot(format!("{prefix}.W_c"), classes, input_size, rng)?,
            b: store.add(format!("{prefix}.b_c"), Tensor::zeros(&[classes]))?,
            classes,
            input_size,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// Taped logits for every row of `x` (`N × input`).
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul_t(x, w)?;
        tape.add_row(z, b)
    }
}

/// Class distribution for a single sentence vector.
pub fn classify(g: &[f64], params: &ClassifierParams, store: &ParamStore) -> Result<Vec<f64>> {
    if g.len() != params.input_size {
        return arg(format!(
            "classify: vector of length {} for input size {}",
            g.len(),
            params.input_size
        ));
    }
    let mut z = store.value(params.b).data().to_vec();
    store.value(params.w).matvec_into(g, &mut z, true);
    softmax_in_place(&mut z);
    Ok(z)
}

/// Index of the largest entry, preferring the smallest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `a × input`
    pub w: ParamId,
    pub b: ParamId,
    /// `a`
    pub u: ParamId,
    pub attn_size: usize,
    pub input_size: usize,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        attn_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if attn_size == 0 || input_size == 0 {
            return arg("attention sizes must be positive");
        }
        let bound = (3.0 / attn_size as f64).sqrt();
        Ok(Self {
            w: store.add_glorot(format!("{prefix}.W_a"), attn_size, input_size, rng)?,
            b: store.add(format!("{prefix}.b_a"), Tensor::zeros(&[attn_size]))?,
            u: store.add(format!("{prefix}.u"), Tensor::uniform(&[attn_size], bound, rng))?,
            attn_size,
            input_size,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b, self.u]
    }

    /// Pooled vector per segment (`B × input`) from word states `h`
    /// (`R × input`). Every row of each segment, boundary rows included,
    /// takes part.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, h: Var, segs: &Arc<Segments>) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let u = tape.param(store, self.u);
        let u = tape.reshape(u, &[self.attn_size, 1])?;
        let eps = tape.matmul_t(h, w)?;
        let eps = tape.add_row(eps, b)?;
        let eps = tape.tanh(eps)?;
        let scores = tape.matmul(eps, u)?;
        let alpha = tape.segment_softmax(scores, segs)?;
        let weighted = tape.mul_col(h, alpha)?;
        tape.segment_sum(weighted, segs)
    }
}

/// Attention weights and pooled vector for one sentence (`rows × input`).
pub fn attend(word_h: &Tensor, params: &AttentionParams, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
    if word_h.rank() != 2 || word_h.rows() == 0 || word_h.cols() != params.input_size {
        return arg(format!(
            "attend: states of shape {:?} for input size {}",
            word_h.shape(),
            params.input_size
        ));
    }
    let w = store.value(params.w);
    let b = store.value(params.b).data();
    let u = store.value(params.u).data();
    let mut alpha: Vec<f64> = (0..word_h.rows())
        .map(|t| {
            let mut eps = b.to_vec();
            w.matvec_into(word_h.row(t), &mut eps, true);
            eps.iter().zip(u).map(|(e, uk)| e.tanh() * uk).sum()
        })
        .collect();
    softmax_in_place(&mut alpha);
    let mut g = vec![0.0; word_h.cols()];
    for (t, a) in alpha.iter().enumerate() {
        for (gk, hk) in g.iter_mut().zip(word_h.row(t)) {
            *gk += a * hk;
        }
    }
    Ok((alpha, g))
}
