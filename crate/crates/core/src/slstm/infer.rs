//! Per-token S-LSTM transition on plain tensors.
//!
//! Every function here reads only the previous state, so the word updates of
//! one step are independent and [`transition_parallel`] may hand disjoint
//! token ranges to different threads without changing a single bit of the
//! result.

use crate::autodiff::ParamStore;
use crate::error::{arg, Result};
use crate::tensor::{sigmoid, softmax_in_place, Tensor};

use super::{GateKind, SLstmParams};

#[derive(Clone, Debug, PartialEq)]
pub struct SLstmState {
    /// `(n+2) × d`
    pub word_h: Tensor,
    /// `(n+2) × d`
    pub word_c: Tensor,
    /// One hidden vector per sentence node.
    pub sent_g: Vec<Vec<f64>>,
    pub sent_c: Vec<Vec<f64>>,
    pub step: usize,
}

impl SLstmState {
    /// Number of word positions including both boundary tokens.
    pub fn positions(&self) -> usize {
        self.word_h.rows()
    }
}

/// Gate activations of one word update. `i`, every `l`, every `r`, `f` and
/// `s` are the normalised values.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBundle {
    pub i: Vec<f64>,
    pub l: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub s: Option<Vec<f64>>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
}

impl GateBundle {
    /// Per-coordinate sum of the normalised family.
    pub fn family_sum(&self) -> Vec<f64> {
        let mut sum = self.i.clone();
        for g in self.l.iter().chain(&self.r).chain(std::iter::once(&self.f)).chain(&self.s) {
            for (a, b) in sum.iter_mut().zip(g) {
                *a += b;
            }
        }
        sum
    }
}

/// Forget family of one sentence-node update.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceGates {
    /// One normalised gate per word position.
    pub word_f: Vec<Vec<f64>>,
    /// Normalised gate on the node's own previous cell.
    pub node_f: Vec<f64>,
    pub o: Vec<f64>,
}

impl SentenceGates {
    pub fn family_sum(&self) -> Vec<f64> {
        let mut sum = self.node_f.clone();
        for g in &self.word_f {
            for (a, b) in sum.iter_mut().zip(g) {
                *a += b;
            }
        }
        sum
    }
}

pub fn init_state(n: usize, params: &SLstmParams, store: &ParamStore) -> SLstmState {
    let d = params.config.hidden_size;
    let h0 = store.value(params.h0).data();
    let rows = n + 2;
    let word_h = Tensor::matrix(rows, d, h0.repeat(rows)).expect("init shape");
    let m = params.config.sentence_nodes;
    SLstmState {
        word_h,
        word_c: Tensor::zeros(&[rows, d]),
        sent_g: vec![h0.to_vec(); m],
        sent_c: vec![vec![0.0; d]; m],
        step: 0,
    }
}

/// Sentence-side inputs shared by every word update of one transition.
struct StepContext {
    c_mean: Option<Vec<f64>>,
    /// `V_x · g` per gate.
    vg: Vec<Option<Vec<f64>>>,
}

impl StepContext {
    fn new(prev: &SLstmState, params: &SLstmParams, store: &ParamStore) -> Self {
        if prev.sent_g.is_empty() {
            return Self {
                c_mean: None,
                vg: vec![None; params.gates.len()],
            };
        }
        let g_mean = mean_rows(&prev.sent_g);
        let c_mean = mean_rows(&prev.sent_c);
        let vg = params
            .gates
            .iter()
            .map(|gate| {
                gate.v.map(|v| {
                    let mut out = vec![0.0; g_mean.len()];
                    store.value(v).matvec_into(&g_mean, &mut out, false);
                    out
                })
            })
            .collect();
        Self {
            c_mean: Some(c_mean),
            vg,
        }
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    out
}

fn check_state(prev: &SLstmState, params: &SLstmParams) -> Result<()> {
    let cfg = &params.config;
    if prev.word_h.cols() != cfg.hidden_size || prev.word_c.shape() != prev.word_h.shape() {
        return arg(format!(
            "state of shape {:?} does not match hidden size {}",
            prev.word_h.shape(),
            cfg.hidden_size
        ));
    }
    if prev.sent_g.len() != cfg.sentence_nodes || prev.sent_c.len() != cfg.sentence_nodes {
        return arg(format!(
            "state has {} sentence nodes, config expects {}",
            prev.sent_g.len(),
            cfg.sentence_nodes
        ));
    }
    Ok(())
}

fn word_update(
    i: usize,
    prev: &SLstmState,
    x_i: &[f64],
    params: &SLstmParams,
    store: &ParamStore,
    ctx: &StepContext,
) -> (GateBundle, Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let d = cfg.hidden_size;
    let w = cfg.window as isize;
    let rows = prev.positions() as isize;
    let neighbour = |offset: isize| -> Option<usize> {
        let k = i as isize + offset;
        (0..rows).contains(&k).then_some(k as usize)
    };

    let mut xi = vec![0.0; cfg.span() * d];
    for (slot, offset) in (-w..=w).enumerate() {
        if let Some(k) = neighbour(offset) {
            xi[slot * d..(slot + 1) * d].copy_from_slice(prev.word_h.row(k));
        }
    }

    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(params.gates.len());
    for (gi, gate) in params.gates.iter().enumerate() {
        let mut z = store.value(gate.b).data().to_vec();
        store.value(gate.w).matvec_into(&xi, &mut z, true);
        store.value(gate.u).matvec_into(x_i, &mut z, true);
        if let Some(vg) = &ctx.vg[gi] {
            for (a, b) in z.iter_mut().zip(vg) {
                *a += b;
            }
        }
        let squash: fn(f64) -> f64 = if gate.kind == GateKind::Candidate { f64::tanh } else { sigmoid };
        z.iter_mut().for_each(|x| *x = squash(*x));
        pre.push(z);
    }

    let k = params.normalised_count();
    let mut col = vec![0.0; k];
    for j in 0..d {
        for (m, p) in pre[..k].iter().enumerate() {
            col[m] = p[j];
        }
        softmax_in_place(&mut col);
        for (m, p) in pre[..k].iter_mut().enumerate() {
            p[j] = col[m];
        }
    }

    let mut c = vec![0.0; d];
    let zero = vec![0.0; d];
    let cell_at = |offset: isize| neighbour(offset).map_or(&zero[..], |k| prev.word_c.row(k));
    let mut bundle = GateBundle {
        i: Vec::new(),
        l: Vec::new(),
        r: Vec::new(),
        f: Vec::new(),
        s: None,
        o: Vec::new(),
        u: Vec::new(),
    };
    for (gate, act) in params.gates.iter().zip(pre) {
        let source: Option<&[f64]> = match gate.kind {
            GateKind::Left(k) => Some(cell_at(-(k as isize))),
            GateKind::Right(k) => Some(cell_at(k as isize)),
            GateKind::Forget => Some(prev.word_c.row(i)),
            GateKind::Sentence => ctx.c_mean.as_deref(),
            _ => None,
        };
        if let Some(src) = source {
            for ((cj, a), s) in c.iter_mut().zip(&act).zip(src) {
                *cj += a * s;
            }
        }
        match gate.kind {
            GateKind::Input => bundle.i = act,
            GateKind::Left(_) => bundle.l.push(act),
            GateKind::Right(_) => bundle.r.push(act),
            GateKind::Forget => bundle.f = act,
            GateKind::Sentence => bundle.s = Some(act),
            GateKind::Output => bundle.o = act,
            GateKind::Candidate => bundle.u = act,
        }
    }
    for (cj, (a, u)) in c.iter_mut().zip(bundle.i.iter().zip(&bundle.u)) {
        *cj += a * u;
    }
    let h = c.iter().zip(&bundle.o).map(|(cj, o)| o * cj.tanh()).collect();
    (bundle, h, c)
}

fn check_word(i: usize, prev: &SLstmState, x_i: &[f64], params: &SLstmParams) -> Result<()> {
    check_state(prev, params)?;
    if i >= prev.positions() {
        return arg(format!("token index {i} out of 0..{}", prev.positions()));
    }
    if x_i.len() != params.config.input_size {
        return arg(format!(
            "input of width {} for input size {}",
            x_i.len(),
            params.config.input_size
        ));
    }
    Ok(())
}

/// Normalised gates of the update of word `i`.
pub fn word_gates(
    i: usize,
    prev: &SLstmState,
    x_i: &[f64],
    params: &SLstmParams,
    store: &ParamStore,
) -> Result<GateBundle> {
    check_word(i, prev, x_i, params)?;
    let ctx = StepContext::new(prev, params, store);
    Ok(word_update(i, prev, x_i, params, store, &ctx).0)
}

/// New `(h_i, c_i)` for word `i`.
pub fn word_step(
    i: usize,
    prev: &SLstmState,
    x_i: &[f64],
    params: &SLstmParams,
    store: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_word(i, prev, x_i, params)?;
    let ctx = StepContext::new(prev, params, store);
    let (_, h, c) = word_update(i, prev, x_i, params, store, &ctx);
    Ok((h, c))
}

fn sentence_update(prev: &SLstmState, params: &SLstmParams, store: &ParamStore, j: usize) -> (SentenceGates, Vec<f64>, Vec<f64>) {
    let d = params.config.hidden_size;
    let node = &params.nodes[j];
    let g = &prev.sent_g[j];
    let n_rows = prev.positions();

    let mut h_bar = vec![0.0; d];
    for r in 0..n_rows {
        for (a, b) in h_bar.iter_mut().zip(prev.word_h.row(r)) {
            *a += b;
        }
    }
    let inv = 1.0 / n_rows as f64;
    h_bar.iter_mut().for_each(|x| *x *= inv);
    let m = prev.sent_g.len();
    if m > 1 {
        let inv = 1.0 / (m - 1) as f64;
        for (k, other) in prev.sent_g.iter().enumerate() {
            if k != j {
                for (a, b) in h_bar.iter_mut().zip(other) {
                    *a += b * inv;
                }
            }
        }
    }

    let affine = |wm, um, bv, left: &[f64], right: &[f64]| -> Vec<f64> {
        let mut z = store.value(bv).data().to_vec();
        store.value(wm).matvec_into(left, &mut z, true);
        store.value(um).matvec_into(right, &mut z, true);
        z.iter_mut().for_each(|x| *x = sigmoid(*x));
        z
    };
    let mut node_f = affine(node.w_g, node.u_g, node.b_g, g, &h_bar);
    let o = affine(node.w_o, node.u_o, node.b_o, g, &h_bar);

    let mut wf_g = vec![0.0; d];
    store.value(node.w_f).matvec_into(g, &mut wf_g, false);
    let uf = store.value(node.u_f);
    let bf = store.value(node.b_f).data();
    let mut word_f: Vec<Vec<f64>> = (0..n_rows)
        .map(|r| {
            let mut z = bf.to_vec();
            uf.matvec_into(prev.word_h.row(r), &mut z, true);
            for (a, b) in z.iter_mut().zip(&wf_g) {
                *a = sigmoid(*a + b);
            }
            z
        })
        .collect();

    let mut col = vec![0.0; n_rows + 1];
    for k in 0..d {
        for (r, f) in word_f.iter().enumerate() {
            col[r] = f[k];
        }
        col[n_rows] = node_f[k];
        softmax_in_place(&mut col);
        for (r, f) in word_f.iter_mut().enumerate() {
            f[k] = col[r];
        }
        node_f[k] = col[n_rows];
    }

    let mut c: Vec<f64> = node_f.iter().zip(&prev.sent_c[j]).map(|(f, c)| f * c).collect();
    for (r, f) in word_f.iter().enumerate() {
        for ((a, fk), ck) in c.iter_mut().zip(f).zip(prev.word_c.row(r)) {
            *a += fk * ck;
        }
    }
    let h = c.iter().zip(&o).map(|(ck, ok)| ok * ck.tanh()).collect();
    (SentenceGates { word_f, node_f, o }, h, c)
}

fn check_node(prev: &SLstmState, params: &SLstmParams, j: usize) -> Result<()> {
    check_state(prev, params)?;
    if j >= params.config.sentence_nodes {
        return arg(format!(
            "sentence node {j} out of {} nodes",
            params.config.sentence_nodes
        ));
    }
    Ok(())
}

pub fn sentence_gates(prev: &SLstmState, params: &SLstmParams, store: &ParamStore, j: usize) -> Result<SentenceGates> {
    check_node(prev, params, j)?;
    Ok(sentence_update(prev, params, store, j).0)
}

/// New `(g_j, c_g,j)` for sentence node `j`.
pub fn sentence_step(prev: &SLstmState, params: &SLstmParams, store: &ParamStore, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_node(prev, params, j)?;
    let (_, h, c) = sentence_update(prev, params, store, j);
    Ok((h, c))
}

fn check_inputs(prev: &SLstmState, embeddings: &Tensor, params: &SLstmParams) -> Result<()> {
    check_state(prev, params)?;
    if embeddings.rank() != 2 || embeddings.rows() != prev.positions() || embeddings.cols() != params.config.input_size {
        return arg(format!(
            "embeddings of shape {:?} for a state of {} positions and input size {}",
            embeddings.shape(),
            prev.positions(),
            params.config.input_size
        ));
    }
    Ok(())
}

fn assemble(prev: &SLstmState, words: Vec<(Vec<f64>, Vec<f64>)>, nodes: Vec<(Vec<f64>, Vec<f64>)>) -> SLstmState {
    let d = prev.word_h.cols();
    let rows = words.len();
    let mut h = Vec::with_capacity(rows * d);
    let mut c = Vec::with_capacity(rows * d);
    for (hi, ci) in words {
        h.extend(hi);
        c.extend(ci);
    }
    let (sent_g, sent_c) = nodes.into_iter().unzip();
    SLstmState {
        word_h: Tensor::matrix(rows, d, h).expect("state shape"),
        word_c: Tensor::matrix(rows, d, c).expect("state shape"),
        sent_g,
        sent_c,
        step: prev.step + 1,
    }
}

/// One simultaneous update of every word and sentence state.
pub fn transition(prev: &SLstmState, embeddings: &Tensor, params: &SLstmParams, store: &ParamStore) -> Result<SLstmState> {
    transition_parallel(prev, embeddings, params, store, 1)
}

/// [`transition`] with word updates split into `workers` contiguous token
/// ranges, each on its own thread. Sentence nodes are updated on the calling
/// thread meanwhile.
pub fn transition_parallel(
    prev: &SLstmState,
    embeddings: &Tensor,
    params: &SLstmParams,
    store: &ParamStore,
    workers: usize,
) -> Result<SLstmState> {
    check_inputs(prev, embeddings, params)?;
    let ctx = StepContext::new(prev, params, store);
    let rows = prev.positions();
    let update = |i: usize| {
        let (_, h, c) = word_update(i, prev, embeddings.row(i), params, store, &ctx);
        (h, c)
    };
    let node_updates = || -> Vec<_> {
        (0..params.config.sentence_nodes)
            .map(|j| {
                let (_, h, c) = sentence_update(prev, params, store, j);
                (h, c)
            })
            .collect()
    };
    let workers = workers.clamp(1, rows);
    if workers == 1 {
        let words = (0..rows).map(update).collect();
        return Ok(assemble(prev, words, node_updates()));
    }
    let chunk = rows.div_ceil(workers);
    let (words, nodes) = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..rows)
            .step_by(chunk)
            .map(|start| {
                let update = &update;
                scope.spawn(move || (start..(start + chunk).min(rows)).map(update).collect::<Vec<_>>())
            })
            .collect();
        let nodes = node_updates();
        let words: Vec<_> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("word update worker panicked"))
            .collect();
        (words, nodes)
    });
    Ok(assemble(prev, words, nodes))
}

/// Runs `steps` transitions with `workers` threads per step and returns the
/// final word hiddens and the sentence representation (the first node's
/// hidden, or the mean word hidden when there are no sentence nodes).
pub fn encode_parallel(
    embeddings: &Tensor,
    params: &SLstmParams,
    store: &ParamStore,
    workers: usize,
) -> Result<(Tensor, Vec<f64>)> {
    params.config.validate()?;
    if embeddings.rows() < 2 {
        return arg("embeddings must include both boundary rows");
    }
    let mut state = init_state(embeddings.rows() - 2, params, store);
    for _ in 0..params.config.steps {
        state = transition_parallel(&state, embeddings, params, store, workers)?;
    }
    let g = match state.sent_g.first() {
        Some(g) => g.clone(),
        None => {
            let rows: Vec<Vec<f64>> = (0..state.positions()).map(|r| state.word_h.row(r).to_vec()).collect();
            mean_rows(&rows)
        }
    };
    Ok((state.word_h, g))
}

pub fn encode(embeddings: &Tensor, params: &SLstmParams, store: &ParamStore) -> Result<(Tensor, Vec<f64>)> {
    encode_parallel(embeddings, params, store, 1)
}

/// State after `t` transitions, for inspecting intermediate steps.
pub fn run_steps(embeddings: &Tensor, params: &SLstmParams, store: &ParamStore, t: usize) -> Result<SLstmState> {
    if embeddings.rows() < 2 {
        return arg("embeddings must include both boundary rows");
    }
    let mut state = init_state(embeddings.rows() - 2, params, store);
    for _ in 0..t {
        state = transition(&state, embeddings, params, store)?;
    }
    Ok(state)
}
