//! Bidirectional LSTM baseline with softmax-normalised input and forget
//! gates, plus stacking.
//!
//! Indexing follows the sentence layout used throughout the crate: a
//! sentence of `n` words occupies rows `0..=n+1` (boundary tokens included).
//! The forward scan starts from its learned initial state at row 0 and reads
//! `x_1..x_{n+1}`; the backward scan starts from its own initial state at row
//! `n+1` and reads `x_n..x_0`. Row `t` of the output is `[h→_t; h←_t]` and
//! the sentence vector is `[h→_{n+1}; h←_0]`.

pub mod graph;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{arg, Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Gate order: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "u"];

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `d × input_size` per gate.
    pub w: [ParamId; 4],
    /// `d × d` per gate.
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub h_init: ParamId,
    pub c_init: ParamId,
    pub hidden_size: usize,
    pub input_size: usize,
}

impl LstmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::Config("LSTM sizes must be positive".into()));
        }
        let d = hidden_size;
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in GATES {
            w.push(store.add_glorot(format!("{prefix}.W_{g}"), d, input_size, rng)?);
            u.push(store.add_glorot(format!("{prefix}.U_{g}"), d, d, rng)?);
            b.push(store.add(format!("{prefix}.b_{g}"), Tensor::zeros(&[d]))?);
        }
        let h_init = store.add(format!("{prefix}.h_init"), Tensor::uniform(&[d], 0.1, rng))?;
        let c_init = store.add(format!("{prefix}.c_init"), Tensor::zeros(&[d]))?;
        Ok(Self {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: b.try_into().unwrap(),
            h_init,
            c_init,
            hidden_size,
            input_size,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.w.iter().chain(&self.u).chain(&self.b).copied().collect();
        ids.extend([self.h_init, self.c_init]);
        ids
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmParams::register(store, &format!("{prefix}.fw"), input_size, hidden_size, rng)?,
            backward: LstmParams::register(store, &format!("{prefix}.bw"), input_size, hidden_size, rng)?,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size
    }

    /// Width of the concatenated output.
    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden_size
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.forward.param_ids();
        ids.extend(self.backward.param_ids());
        ids
    }
}

/// Registers `layers` stacked BiLSTM layers named `{prefix}.layer{k}`.
pub fn register_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input_size: usize,
    hidden_size: usize,
    layers: usize,
    rng: &mut R,
) -> Result<Vec<BiLstmParams>> {
    if layers == 0 {
        return Err(Error::Config("at least one BiLSTM layer is required".into()));
    }
    let mut out = Vec::with_capacity(layers);
    let mut input = input_size;
    for k in 0..layers {
        let layer = BiLstmParams::register(store, &format!("{prefix}.layer{k}"), input, hidden_size, rng)?;
        input = layer.output_size();
        out.push(layer);
    }
    Ok(out)
}

/// Checks that each layer consumes the previous layer's output width.
pub fn check_chain(layers: &[BiLstmParams], input_size: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("empty BiLSTM stack".into()));
    }
    let mut expected = input_size;
    for (k, l) in layers.iter().enumerate() {
        if l.input_size() != expected || l.backward.input_size != expected || l.backward.hidden_size != l.hidden_size() {
            return Err(Error::Config(format!(
                "layer {k} expects input {} but receives {expected}",
                l.input_size()
            )));
        }
        expected = l.output_size();
    }
    Ok(())
}

/// One LSTM transition.
pub fn lstm_step(
    h_prev: &[f64],
    c_prev: &[f64],
    x_t: &[f64],
    params: &LstmParams,
    store: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.hidden_size;
    if h_prev.len() != d || c_prev.len() != d || x_t.len() != params.input_size {
        return arg(format!(
            "lstm_step: state {}/{} and input {} for hidden {d}, input {}",
            h_prev.len(),
            c_prev.len(),
            x_t.len(),
            params.input_size
        ));
    }
    let mut pre: Vec<Vec<f64>> = (0..4)
        .map(|g| {
            let mut z = store.value(params.b[g]).data().to_vec();
            store.value(params.w[g]).matvec_into(x_t, &mut z, true);
            store.value(params.u[g]).matvec_into(h_prev, &mut z, true);
            z
        })
        .collect();
    for (g, z) in pre.iter_mut().enumerate() {
        let squash: fn(f64) -> f64 = if g == 3 { f64::tanh } else { sigmoid };
        z.iter_mut().for_each(|v| *v = squash(*v));
    }
    let mut c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for k in 0..d {
        let (ih, fh) = (pre[0][k], pre[1][k]);
        let m = ih.max(fh);
        let (ei, ef) = ((ih - m).exp(), (fh - m).exp());
        let (i, f) = (ei / (ei + ef), ef / (ei + ef));
        c[k] = c_prev[k] * f + pre[3][k] * i;
        h[k] = pre[2][k] * c[k].tanh();
    }
    Ok((h, c))
}

/// Per-step gate values `(i, f)` after normalisation, for inspection.
pub fn input_forget_gates(
    h_prev: &[f64],
    x_t: &[f64],
    params: &LstmParams,
    store: &ParamStore,
) -> (Vec<f64>, Vec<f64>) {
    let gate = |g: usize| {
        let mut z = store.value(params.b[g]).data().to_vec();
        store.value(params.w[g]).matvec_into(x_t, &mut z, true);
        store.value(params.u[g]).matvec_into(h_prev, &mut z, true);
        z.into_iter().map(sigmoid).collect::<Vec<_>>()
    };
    let (ih, fh) = (gate(0), gate(1));
    ih.iter()
        .zip(&fh)
        .map(|(&a, &b)| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            (ea / (ea + eb), eb / (ea + eb))
        })
        .unzip()
}

fn scan(embeddings: &Tensor, params: &LstmParams, store: &ParamStore, reverse: bool) -> Result<Vec<Vec<f64>>> {
    let rows = embeddings.rows();
    let mut out = vec![Vec::new(); rows];
    let mut h = store.value(params.h_init).data().to_vec();
    let mut c = store.value(params.c_init).data().to_vec();
    let start = if reverse { rows - 1 } else { 0 };
    out[start] = h.clone();
    for s in 1..rows {
        let t = if reverse { rows - 1 - s } else { s };
        let (nh, nc) = lstm_step(&h, &c, embeddings.row(t), params, store)?;
        h = nh;
        c = nc;
        out[t] = h.clone();
    }
    Ok(out)
}

/// Encodes one sentence (`(n+2) × input_size`) with both directions.
pub fn bilstm_encode(embeddings: &Tensor, params: &BiLstmParams, store: &ParamStore) -> Result<(Tensor, Vec<f64>)> {
    if embeddings.rank() != 2 || embeddings.rows() < 2 || embeddings.cols() != params.input_size() {
        return arg(format!(
            "bilstm_encode: embeddings of shape {:?} for input size {}",
            embeddings.shape(),
            params.input_size()
        ));
    }
    let fw = scan(embeddings, &params.forward, store, false)?;
    let bw = scan(embeddings, &params.backward, store, true)?;
    let rows = embeddings.rows();
    let mut data = Vec::with_capacity(rows * params.output_size());
    for (f, b) in fw.iter().zip(&bw) {
        data.extend_from_slice(f);
        data.extend_from_slice(b);
    }
    let mut g = fw[rows - 1].clone();
    g.extend_from_slice(&bw[0]);
    Ok((Tensor::matrix(rows, params.output_size(), data)?, g))
}

/// Applies the layers in order, feeding each layer's word states to the
/// next; the sentence vector comes from the top layer.
pub fn stack(layers: &[BiLstmParams], embeddings: &Tensor, store: &ParamStore) -> Result<(Tensor, Vec<f64>)> {
    check_chain(layers, embeddings.cols())?;
    let (mut h, mut g) = bilstm_encode(embeddings, &layers[0], store)?;
    for layer in &layers[1..] {
        (h, g) = bilstm_encode(&h, layer, store)?;
    }
    Ok((h, g))
}

/// Encodes several sentences, distributing whole sentences over `workers`
/// threads. A single sentence always runs on one thread.
pub fn stack_batch(
    layers: &[BiLstmParams],
    sentences: &[Tensor],
    store: &ParamStore,
    workers: usize,
) -> Result<Vec<(Tensor, Vec<f64>)>> {
    let workers = workers.clamp(1, sentences.len().max(1));
    if workers == 1 {
        return sentences.iter().map(|s| stack(layers, s, store)).collect();
    }
    let chunk = sentences.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| stack(layers, s, store)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("encoder worker panicked"))
            .collect()
    })
}
