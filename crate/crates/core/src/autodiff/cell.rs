//! Fused gated cell update: sigmoid gates normalised by a joint softmax,
//! a weighted mix of cell sources, and `h = σ(o) ⊙ tanh(c)`.
//!
//! The pre-activation matrix holds `k` family gates, then the output gate,
//! then the candidate, each `d` columns wide.

use crate::error::{arg, Result};
use crate::tensor::{sigmoid, Tensor};

use super::segments::Segments;

/// What a family gate multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellSource {
    /// The candidate `tanh(z_u)`.
    Candidate,
    /// The previous cell of row `r + offset` in the same segment, zero
    /// outside it.
    Shift(isize),
    /// The row of the optional extra input.
    Extra,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub width: usize,
    pub family: Vec<CellSource>,
}

impl CellSpec {
    pub fn gates(&self) -> usize {
        self.family.len() + 2
    }

    pub(crate) fn check(&self, pre: &Tensor, c: &Tensor, extra: Option<&Tensor>, segs: &Segments) -> Result<()> {
        let rows = segs.total_rows();
        let ok_pre = pre.rank() == 2 && pre.rows() == rows && pre.cols() == self.gates() * self.width;
        let ok_c = c.shape() == [rows, self.width];
        let ok_x = extra.map_or(true, |x| x.shape() == [rows, self.width]);
        let needs_extra = self.family.contains(&CellSource::Extra);
        if !(ok_pre && ok_c && ok_x) || needs_extra != extra.is_some() {
            return arg(format!(
                "gated cell: pre {:?}, cell {:?}, extra {:?} for {} gates of width {} over {rows} rows",
                pre.shape(),
                c.shape(),
                extra.map(|x| x.shape().to_vec()),
                self.gates(),
                self.width
            ));
        }
        Ok(())
    }

    fn sources(&self, segs: &Segments, r: usize) -> Vec<Option<usize>> {
        self.family
            .iter()
            .map(|s| match s {
                CellSource::Shift(o) => segs.shifted(r, *o),
                _ => Some(r),
            })
            .collect()
    }
}

/// Gate values at one coordinate.
struct Point {
    /// Normalised family gates.
    p: Vec<f64>,
    /// Un-normalised sigmoid activations.
    a: Vec<f64>,
    src: Vec<f64>,
    o: f64,
    u: f64,
    c: f64,
}

#[allow(clippy::too_many_arguments)]
fn point(
    spec: &CellSpec,
    pre: &[f64],
    c: &Tensor,
    extra: Option<&Tensor>,
    rows: &[Option<usize>],
    r: usize,
    j: usize,
    pt: &mut Point,
) {
    let (k, d) = (spec.family.len(), spec.width);
    pt.o = sigmoid(pre[k * d + j]);
    pt.u = pre[(k + 1) * d + j].tanh();
    let mut z = 0.0;
    for m in 0..k {
        let a = sigmoid(pre[m * d + j]);
        let e = a.exp();
        pt.a[m] = a;
        pt.p[m] = e;
        z += e;
        pt.src[m] = match (spec.family[m], rows[m]) {
            (CellSource::Candidate, _) => pt.u,
            (CellSource::Shift(_), Some(s)) => c.row(s)[j],
            (CellSource::Shift(_), None) => 0.0,
            (CellSource::Extra, _) => extra.expect("checked").row(r)[j],
        };
    }
    let mut cell = 0.0;
    for m in 0..k {
        pt.p[m] /= z;
        cell += pt.p[m] * pt.src[m];
    }
    pt.c = cell;
}

/// Per coordinate: `k` normalised gates, `k` sigmoid activations, then
/// `o`, `u` and the new cell.
pub(crate) fn saved_len(spec: &CellSpec) -> usize {
    2 * spec.family.len() + 3
}

/// Returns `(h, c, saved)` with `h` and `c` both `rows × width` and the
/// activations the backward pass needs.
pub(crate) fn forward(
    spec: &CellSpec,
    pre: &Tensor,
    c: &Tensor,
    extra: Option<&Tensor>,
    segs: &Segments,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    spec.check(pre, c, extra, segs)?;
    let (rows, d, k) = (segs.total_rows(), spec.width, spec.family.len());
    let mut h = vec![0.0; rows * d];
    let mut nc = vec![0.0; rows * d];
    let stride = saved_len(spec);
    let mut saved = Vec::with_capacity(rows * d * stride);
    let mut pt = Point {
        p: vec![0.0; k],
        a: vec![0.0; k],
        src: vec![0.0; k],
        o: 0.0,
        u: 0.0,
        c: 0.0,
    };
    for r in 0..rows {
        let srcs = spec.sources(segs, r);
        let pr = pre.row(r);
        for j in 0..d {
            point(spec, pr, c, extra, &srcs, r, j, &mut pt);
            nc[r * d + j] = pt.c;
            h[r * d + j] = pt.o * pt.c.tanh();
            saved.extend_from_slice(&pt.p);
            saved.extend_from_slice(&pt.a);
            saved.extend_from_slice(&[pt.o, pt.u, pt.c]);
        }
    }
    Ok((Tensor::matrix(rows, d, h)?, Tensor::matrix(rows, d, nc)?, saved))
}

pub(crate) struct CellGrads {
    pub pre: Tensor,
    pub c: Tensor,
    pub extra: Option<Tensor>,
}

/// Adjoints of the inputs given adjoints of `h` and of the new cell.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &CellSpec,
    c: &Tensor,
    extra: Option<&Tensor>,
    segs: &Segments,
    saved: &[f64],
    dh: &[f64],
    dcell: &[f64],
) -> Result<CellGrads> {
    let (rows, d, k) = (segs.total_rows(), spec.width, spec.family.len());
    let stride = saved_len(spec);
    let mut dpre = Tensor::zeros(&[rows, spec.gates() * d]);
    let mut dc = Tensor::zeros(c.shape());
    let mut dx = extra.map(|x| Tensor::zeros(x.shape()));
    let mut dp = vec![0.0; k];
    let mut src = vec![0.0; k];
    for r in 0..rows {
        let srcs = spec.sources(segs, r);
        for j in 0..d {
            let idx = r * d + j;
            let sv = &saved[idx * stride..(idx + 1) * stride];
            let (p, a) = (&sv[..k], &sv[k..2 * k]);
            let (o, u, cell) = (sv[2 * k], sv[2 * k + 1], sv[2 * k + 2]);
            for m in 0..k {
                src[m] = match (spec.family[m], srcs[m]) {
                    (CellSource::Candidate, _) => u,
                    (CellSource::Shift(_), Some(s)) => c.row(s)[j],
                    (CellSource::Shift(_), None) => 0.0,
                    (CellSource::Extra, _) => extra.expect("checked").row(r)[j],
                };
            }
            let tc = cell.tanh();
            let dn = dcell[idx] + dh[idx] * o * (1.0 - tc * tc);
            let dz_o = dh[idx] * tc * o * (1.0 - o);
            let mut du = 0.0;
            let mut dot = 0.0;
            for m in 0..k {
                dp[m] = dn * src[m];
                dot += p[m] * dp[m];
                let ds = dn * p[m];
                match (spec.family[m], srcs[m]) {
                    (CellSource::Candidate, _) => du += ds,
                    (CellSource::Shift(_), Some(s)) => dc.row_mut(s)[j] += ds,
                    (CellSource::Shift(_), None) => {}
                    (CellSource::Extra, _) => dx.as_mut().expect("checked").row_mut(r)[j] += ds,
                }
            }
            let out = dpre.row_mut(r);
            for m in 0..k {
                // Softmax, then the exponential's input is the sigmoid output.
                let da = p[m] * (dp[m] - dot);
                out[m * d + j] = da * a[m] * (1.0 - a[m]);
            }
            out[k * d + j] = dz_o;
            out[(k + 1) * d + j] = du * (1.0 - u * u);
        }
    }
    Ok(CellGrads { pre: dpre, c: dc, extra: dx })
}
