//! Batched BiLSTM forward pass recorded on a tape.
//!
//! Sentences are packed as in [`crate::slstm::graph`]. Each direction runs
//! time-major over a `B × d` state matrix; at step `s` every sentence still
//! active gathers its own input row, and finished sentences keep their state
//! through a row mask.

use std::sync::Arc;

use crate::autodiff::{ParamStore, Segments, Tape, Var};
use crate::error::{arg, Result};

use super::{check_chain, BiLstmParams, LstmParams};

#[derive(Clone, Copy, Debug)]
pub struct BiLstmOutput {
    /// `R × 2d`
    pub word_h: Var,
    /// `B × 2d`
    pub g: Var,
}

/// Runs one direction; returns per-row hiddens (`R × d`) and the final
/// state of each sentence (`B × d`).
fn direction(
    tape: &mut Tape,
    store: &ParamStore,
    p: &LstmParams,
    x: Var,
    segs: &Arc<Segments>,
    reverse: bool,
) -> Result<(Var, Var)> {
    let d = p.hidden_size;
    let ws: Vec<Var> = p.w.iter().map(|&id| tape.param(store, id)).collect();
    let us: Vec<Var> = p.u.iter().map(|&id| tape.param(store, id)).collect();
    let mut bs = Vec::with_capacity(4);
    for &id in &p.b {
        let b = tape.param(store, id);
        bs.push(tape.reshape(b, &[1, d])?);
    }
    let w = tape.concat_rows(&ws)?;
    let u = tape.concat_rows(&us)?;
    let b = tape.concat_rows(&bs)?;
    let b = tape.reshape(b, &[4 * d])?;
    let xw = tape.matmul_t(x, w)?;
    let xw = tape.add_row(xw, b)?;

    let lens = segs.lengths();
    let batch = lens.len();
    let max_len = *lens.iter().max().expect("non-empty batch");
    let starts: Vec<usize> = (0..batch).map(|b| segs.range(b).start).collect();

    let h_init = tape.param(store, p.h_init);
    let c_init = tape.param(store, p.c_init);
    let mut h = tape.repeat_row(h_init, batch)?;
    let mut c = tape.repeat_row(c_init, batch)?;
    let mut states = vec![h];
    for s in 1..max_len {
        let mut idx = Vec::with_capacity(batch);
        let mut mask = Vec::with_capacity(batch);
        for (b, &len) in lens.iter().enumerate() {
            let active = s < len;
            let pos = if reverse { len.saturating_sub(1 + s) } else { s.min(len - 1) };
            idx.push(starts[b] + pos);
            mask.push(active);
        }
        let xs = tape.gather_rows(xw, idx.into())?;
        let hu = tape.matmul_t(h, u)?;
        let z = tape.add(xs, hu)?;
        let mut act = Vec::with_capacity(4);
        for g in 0..4 {
            let zg = tape.slice_cols(z, g * d, d)?;
            act.push(if g == 3 { tape.tanh(zg)? } else { tape.sigmoid(zg)? });
        }
        let ifg = tape.softmax_group(&act[..2])?;
        let keep = tape.mul(c, ifg[1])?;
        let write = tape.mul(act[3], ifg[0])?;
        let c_new = tape.add(keep, write)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(act[2], tc)?;
        let mask: Arc<[bool]> = mask.into();
        h = tape.select_rows(h_new, h, mask.clone())?;
        c = tape.select_rows(c_new, c, mask)?;
        states.push(h);
    }

    let all = tape.concat_rows(&states)?;
    let mut rows = Vec::with_capacity(segs.total_rows());
    for (b, &len) in lens.iter().enumerate() {
        for pos in 0..len {
            let s = if reverse { len - 1 - pos } else { pos };
            rows.push(s * batch + b);
        }
    }
    let per_row = tape.gather_rows(all, rows.into())?;
    Ok((per_row, h))
}

/// One BiLSTM layer over packed rows `x` (`R × input_size`).
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &BiLstmParams,
    x: Var,
    segs: &Arc<Segments>,
) -> Result<BiLstmOutput> {
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.rows() != segs.total_rows() || xv.cols() != layer.input_size() {
        return arg(format!(
            "BiLSTM input of shape {:?} for {} packed rows and input size {}",
            xv.shape(),
            segs.total_rows(),
            layer.input_size()
        ));
    }
    let (fw, fw_last) = direction(tape, store, &layer.forward, x, segs, false)?;
    let (bw, bw_first) = direction(tape, store, &layer.backward, x, segs, true)?;
    Ok(BiLstmOutput {
        word_h: tape.concat_cols(&[fw, bw])?,
        g: tape.concat_cols(&[fw_last, bw_first])?,
    })
}

/// Stacked layers; `between` is applied to each layer's word states before
/// they feed the next layer (for example inter-layer dropout).
pub fn stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[BiLstmParams],
    x: Var,
    segs: &Arc<Segments>,
    mut between: impl FnMut(&mut Tape, Var, usize) -> Result<Var>,
) -> Result<BiLstmOutput> {
    check_chain(layers, tape.value(x).cols())?;
    let mut out = layer_forward(tape, store, &layers[0], x, segs)?;
    for (k, layer) in layers.iter().enumerate().skip(1) {
        let input = between(tape, out.word_h, k - 1)?;
        out = layer_forward(tape, store, layer, input, segs)?;
    }
    Ok(out)
}
