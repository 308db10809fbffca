//! Batched S-LSTM forward pass recorded on a tape.
//!
//! All sentences of a batch are packed into one `R × ·` matrix whose row
//! layout is given by a [`Segments`]; each segment holds one sentence
//! including its boundary rows. Neighbour access is a [`Tape::shift_rows`]
//! that stops at segment edges, so no padding is involved.

use std::sync::Arc;

use crate::autodiff::{CellSource, CellSpec, ParamStore, Segments, Tape, Var};
use crate::error::{arg, Result};
use crate::tensor::Tensor;

use super::{GateKind, SLstmParams};

#[derive(Clone, Copy, Debug)]
pub struct SLstmOutput {
    /// Final word hiddens, `R × d`.
    pub word_h: Var,
    /// Sentence representation per segment, `B × d`.
    pub g: Var,
}

struct Fused {
    /// `Gd × (2w+1)d`, applied to the concatenated neighbour window.
    w: Var,
    /// `X · Uᵀ + b` for every gate at once, `R × Gd`.
    ux_b: Var,
    /// `Gd × d`
    v: Option<Var>,
    spec: Arc<CellSpec>,
}

fn fuse(tape: &mut Tape, store: &ParamStore, params: &SLstmParams, x: Var) -> Result<Fused> {
    let d = params.config.hidden_size;
    let mut ws = Vec::new();
    let mut us = Vec::new();
    let mut bs = Vec::new();
    let mut vs = Vec::new();
    for gate in &params.gates {
        ws.push(tape.param(store, gate.w));
        us.push(tape.param(store, gate.u));
        let b = tape.param(store, gate.b);
        bs.push(tape.reshape(b, &[1, d])?);
        if let Some(v) = gate.v {
            vs.push(tape.param(store, v));
        }
    }
    let w = tape.concat_rows(&ws)?;
    let u = tape.concat_rows(&us)?;
    let b = tape.concat_rows(&bs)?;
    let width = params.gates.len() * d;
    let b = tape.reshape(b, &[width])?;
    let ux = tape.matmul_t(x, u)?;
    let ux_b = tape.add_row(ux, b)?;
    let v = if vs.is_empty() { None } else { Some(tape.concat_rows(&vs)?) };
    let k = params.normalised_count();
    let family = params.gates[..k]
        .iter()
        .map(|g| match g.kind {
            GateKind::Input => CellSource::Candidate,
            GateKind::Left(j) => CellSource::Shift(-(j as isize)),
            GateKind::Right(j) => CellSource::Shift(j as isize),
            GateKind::Forget => CellSource::Shift(0),
            GateKind::Sentence => CellSource::Extra,
            GateKind::Output | GateKind::Candidate => unreachable!("outside the normalised family"),
        })
        .collect();
    let spec = Arc::new(CellSpec { width: d, family });
    Ok(Fused { w, ux_b, v, spec })
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let sum = tape.add_all(vars)?;
    tape.scale(sum, 1.0 / vars.len() as f64)
}

struct NodeVars {
    w_g: Var,
    u_g: Var,
    b_g: Var,
    w_f: Var,
    u_f: Var,
    b_f: Var,
    w_o: Var,
    u_o: Var,
    b_o: Var,
}

/// Records `steps` S-LSTM transitions over the packed `embeddings`
/// (`R × input_size`).
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SLstmParams,
    embeddings: Var,
    segs: &Arc<Segments>,
) -> Result<SLstmOutput> {
    let cfg = params.config;
    cfg.validate()?;
    let d = cfg.hidden_size;
    let e = tape.value(embeddings);
    if e.rank() != 2 || e.rows() != segs.total_rows() || e.cols() != cfg.input_size {
        return arg(format!(
            "embeddings of shape {:?} for {} packed rows and input size {}",
            e.shape(),
            segs.total_rows(),
            cfg.input_size
        ));
    }
    let rows = segs.total_rows();
    let batch = segs.count();
    let w = cfg.window as isize;

    let fused = fuse(tape, store, params, embeddings)?;
    let nodes: Vec<NodeVars> = params
        .nodes
        .iter()
        .map(|n| NodeVars {
            w_g: tape.param(store, n.w_g),
            u_g: tape.param(store, n.u_g),
            b_g: tape.param(store, n.b_g),
            w_f: tape.param(store, n.w_f),
            u_f: tape.param(store, n.u_f),
            b_f: tape.param(store, n.b_f),
            w_o: tape.param(store, n.w_o),
            u_o: tape.param(store, n.u_o),
            b_o: tape.param(store, n.b_o),
        })
        .collect();

    let h0 = tape.param(store, params.h0);
    let mut h = tape.repeat_row(h0, rows)?;
    let mut c = tape.constant(Tensor::zeros(&[rows, d]));
    let mut g: Vec<Var> = Vec::with_capacity(nodes.len());
    let mut cg: Vec<Var> = Vec::with_capacity(nodes.len());
    for _ in &nodes {
        g.push(tape.repeat_row(h0, batch)?);
        cg.push(tape.constant(Tensor::zeros(&[batch, d])));
    }
    for _ in 0..cfg.steps {
        // Word updates: one product with the concatenated window
        // `[h_{i-w}; ...; h_{i+w}]`, then the fused gated cell.
        let window: Vec<Var> = (-w..=w)
            .map(|offset| if offset == 0 { Ok(h) } else { tape.shift_rows(h, offset, segs) })
            .collect::<Result<_>>()?;
        let xw = tape.concat_cols(&window)?;
        let mut terms = vec![tape.matmul_t(xw, fused.w)?, fused.ux_b];
        let mut c_mean = None;
        if let Some(v) = fused.v {
            let g_mean = mean_of(tape, &g)?;
            let vg = tape.matmul_t(g_mean, v)?;
            terms.push(tape.broadcast(vg, segs)?);
            let cm = mean_of(tape, &cg)?;
            c_mean = Some(tape.broadcast(cm, segs)?);
        }
        let pre = tape.add_all(&terms)?;
        let (new_h, new_c) = tape.gated_cell(pre, c, c_mean, &fused.spec, segs)?;

        // Sentence updates, all from the previous step.
        let mut new_g = Vec::with_capacity(nodes.len());
        let mut new_cg = Vec::with_capacity(nodes.len());
        let h_avg = if nodes.is_empty() { None } else { Some(tape.segment_mean(h, segs)?) };
        for (j, node) in nodes.iter().enumerate() {
            let mut h_bar = h_avg.expect("sentence nodes present");
            if nodes.len() > 1 {
                let others: Vec<Var> = g.iter().enumerate().filter(|&(o, _)| o != j).map(|(_, &v)| v).collect();
                let om = mean_of(tape, &others)?;
                h_bar = tape.add(h_bar, om)?;
            }
            let gate = |tape: &mut Tape, wm: Var, um: Var, bv: Var| -> Result<Var> {
                let a = tape.matmul_t(g[j], wm)?;
                let b = tape.matmul_t(h_bar, um)?;
                let s = tape.add(a, b)?;
                let s = tape.add_row(s, bv)?;
                tape.sigmoid(s)
            };
            let node_f = gate(tape, node.w_g, node.u_g, node.b_g)?;
            let o = gate(tape, node.w_o, node.u_o, node.b_o)?;

            let wf_g = tape.matmul_t(g[j], node.w_f)?;
            let wf_g = tape.broadcast(wf_g, segs)?;
            let uf_h = tape.matmul_t(h, node.u_f)?;
            let word_f = tape.add(uf_h, wf_g)?;
            let word_f = tape.add_row(word_f, node.b_f)?;
            let word_f = tape.sigmoid(word_f)?;

            // Sigmoid outputs lie in (0, 1), so the exponentials cannot overflow.
            let e_words = tape.exp(word_f)?;
            let e_node = tape.exp(node_f)?;
            let z_words = tape.segment_sum(e_words, segs)?;
            let z = tape.add(z_words, e_node)?;
            let z_b = tape.broadcast(z, segs)?;
            let word_f = tape.div(e_words, z_b)?;
            let node_f = tape.div(e_node, z)?;

            let mixed = tape.mul(word_f, c)?;
            let mixed = tape.segment_sum(mixed, segs)?;
            let keep = tape.mul(node_f, cg[j])?;
            let next_c = tape.add(keep, mixed)?;
            let tc = tape.tanh(next_c)?;
            new_g.push(tape.mul(o, tc)?);
            new_cg.push(next_c);
        }

        h = new_h;
        c = new_c;
        g = new_g;
        cg = new_cg;
    }

    let g_out = match g.first() {
        Some(&g0) => g0,
        None => tape.segment_mean(h, segs)?,
    };
    Ok(SLstmOutput { word_h: h, g: g_out })
}
