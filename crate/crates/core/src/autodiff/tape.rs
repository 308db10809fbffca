use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{arg, Error, Result};
use crate::tensor::{gemm, sigmoid, Tensor};

use super::param::{Gradients, ParamId, ParamStore};
use super::cell::{self, CellSpec};
use super::segments::Segments;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ShiftRows(Var, isize, Arc<Segments>),
    SegmentSum(Var, Arc<Segments>),
    SegmentMean(Var, Arc<Segments>),
    Broadcast(Var, Arc<Segments>),
    RepeatRow(Var),
    SelectRows(Var, Var, Arc<[bool]>),
    SoftmaxGroup(Vec<Var>),
    Pick(Var, usize),
    SegmentSoftmax(Var, Arc<Segments>),
    /// `[h; c]` stacked along a leading axis of 2.
    GatedCell {
        pre: Var,
        c: Var,
        extra: Option<Var>,
        spec: Arc<CellSpec>,
        segs: Arc<Segments>,
        saved: Vec<f64>,
    },
    /// Scalar output whose gradient with respect to each input was
    /// computed alongside the value.
    ScalarLoss(Vec<(Var, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations in evaluation order so that adjoints can be
/// replayed in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::State("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(v.idx)
            .ok_or_else(|| Error::State("variable index out of range".into()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.node(v) {
            Ok(n) => &n.value,
            Err(e) => panic!("{e}"),
        }
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf).expect("constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id)).expect("param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.matmul(self.val(b)?)?;
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.matmul_t(self.val(b)?)?;
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.add(self.val(b)?)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.sub(self.val(b)?)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.mul(self.val(b)?)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a)?.zip_map(self.val(b)?, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b))
    }

    /// Sums a list of equally shaped values left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return arg("add_all of an empty list");
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Matrix `a` (R×n) plus row vector `v` (n) on every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.val(a)?, self.val(v)?);
        if av.rank() != 2 || vv.len() != av.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: av.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        let bias = vv.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, v))
    }

    /// Matrix `a` (R×n) scaled row-wise by column `c` (R×1).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.val(a)?, self.val(c)?);
        if av.rank() != 2 || cv.len() != av.rows() {
            return Err(Error::Dimension {
                op: "mul_col",
                left: av.shape().to_vec(),
                right: cv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(out, Op::MulCol(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.val(a)?.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a)?.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(a)?.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(a)?.reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg("concat_rows of an empty list");
        };
        let cols = self.val(first)?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p)?;
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.val(first)?.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg("concat_cols of an empty list");
        };
        let rows = self.val(first)?.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.val(p)?;
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.val(first)?.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.val(p)?;
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let v = Tensor::matrix(rows, total, data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(a)?;
        if t.rank() != 2 || len == 0 || start + len > t.cols() {
            return arg(format!(
                "slice_cols {start}..{} of shape {:?}",
                start + len,
                t.shape()
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::matrix(t.rows(), len, data)?;
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var> {
        let t = self.val(a)?;
        if rows.is_empty() {
            return arg("gather_rows with no rows");
        }
        if t.rank() != 2 {
            return arg(format!("gather_rows on shape {:?}", t.shape()));
        }
        let mut data = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows.iter() {
            if r >= t.rows() {
                return arg(format!("gather_rows index {r} out of {} rows", t.rows()));
            }
            data.extend_from_slice(t.row(r));
        }
        let v = Tensor::matrix(rows.len(), t.cols(), data)?;
        self.push(v, Op::GatherRows(a, rows))
    }

    /// Row `r` of the result is row `r + offset` of `a` when that row lies
    /// in the same segment, and zero otherwise.
    pub fn shift_rows(&mut self, a: Var, offset: isize, segs: &Arc<Segments>) -> Result<Var> {
        let t = self.val(a)?;
        check_rows("shift_rows", t, segs)?;
        let mut out = Tensor::zeros(t.shape());
        for r in 0..t.rows() {
            if let Some(src) = segs.shifted(r, offset) {
                out.row_mut(r).copy_from_slice(t.row(src));
            }
        }
        self.push(out, Op::ShiftRows(a, offset, segs.clone()))
    }

    pub fn segment_sum(&mut self, a: Var, segs: &Arc<Segments>) -> Result<Var> {
        let out = segment_reduce(self.val(a)?, segs, false)?;
        self.push(out, Op::SegmentSum(a, segs.clone()))
    }

    pub fn segment_mean(&mut self, a: Var, segs: &Arc<Segments>) -> Result<Var> {
        let out = segment_reduce(self.val(a)?, segs, true)?;
        self.push(out, Op::SegmentMean(a, segs.clone()))
    }

    /// Repeats row `b` of `a` (B×n) over every row of segment `b`.
    pub fn broadcast(&mut self, a: Var, segs: &Arc<Segments>) -> Result<Var> {
        let t = self.val(a)?;
        if t.rank() != 2 || t.rows() != segs.count() {
            return arg(format!(
                "broadcast of shape {:?} over {} segments",
                t.shape(),
                segs.count()
            ));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(segs.total_rows() * cols);
        for b in 0..segs.count() {
            for _ in segs.range(b) {
                data.extend_from_slice(t.row(b));
            }
        }
        let v = Tensor::matrix(segs.total_rows(), cols, data)?;
        self.push(v, Op::Broadcast(a, segs.clone()))
    }

    /// Stacks vector `v` into a `count × n` matrix.
    pub fn repeat_row(&mut self, v: Var, count: usize) -> Result<Var> {
        let t = self.val(v)?;
        if t.rank() != 1 || count == 0 {
            return arg(format!("repeat_row of shape {:?}", t.shape()));
        }
        let n = t.len();
        let data = t.data().repeat(count);
        let out = Tensor::matrix(count, n, data)?;
        self.push(out, Op::RepeatRow(v))
    }

    /// Row-wise choice: `new` where `mask` is set, `old` elsewhere.
    pub fn select_rows(&mut self, new: Var, old: Var, mask: Arc<[bool]>) -> Result<Var> {
        let (n, o) = (self.val(new)?, self.val(old)?);
        n.same_shape(o, "select_rows")?;
        if mask.len() != n.rows() {
            return arg("select_rows mask length differs from row count");
        }
        let mut out = o.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(n.row(r));
            }
        }
        self.push(out, Op::SelectRows(new, old, mask))
    }

    /// Per-coordinate softmax across the family `inputs`; returns one
    /// normalised value per input, in order.
    pub fn softmax_group(&mut self, inputs: &[Var]) -> Result<Vec<Var>> {
        let vals: Vec<Tensor> = inputs
            .iter()
            .map(|&v| self.val(v).cloned())
            .collect::<Result<_>>()?;
        let outs = crate::tensor::softmax_group(&vals)?;
        let inner = outs[0].shape().to_vec();
        let mut shape = vec![outs.len()];
        shape.extend_from_slice(&inner);
        let data: Vec<f64> = outs.iter().flat_map(|t| t.data().iter().copied()).collect();
        let group = self.push(Tensor::new(shape, data)?, Op::SoftmaxGroup(inputs.to_vec()))?;
        outs.into_iter()
            .enumerate()
            .map(|(m, t)| self.push(t, Op::Pick(group, m)))
            .collect()
    }

    /// Fused cell update (see [`CellSpec`]); returns `(h, c)`.
    pub fn gated_cell(
        &mut self,
        pre: Var,
        c: Var,
        extra: Option<Var>,
        spec: &Arc<CellSpec>,
        segs: &Arc<Segments>,
    ) -> Result<(Var, Var)> {
        let x = match extra {
            Some(e) => Some(self.val(e)?),
            None => None,
        };
        let (h, nc, saved) = cell::forward(spec, self.val(pre)?, self.val(c)?, x, segs)?;
        let (rows, d) = (h.rows(), h.cols());
        let mut both = h.data().to_vec();
        both.extend_from_slice(nc.data());
        let op = Op::GatedCell {
            pre,
            c,
            extra,
            spec: spec.clone(),
            segs: segs.clone(),
            saved,
        };
        let group = self.push(Tensor::new(vec![2, rows, d], both)?, op)?;
        Ok((self.push(h, Op::Pick(group, 0))?, self.push(nc, Op::Pick(group, 1))?))
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segs: &Arc<Segments>) -> Result<Var> {
        let t = self.val(a)?;
        check_rows("segment_softmax", t, segs)?;
        let mut out = t.clone();
        let cols = t.cols();
        for b in 0..segs.count() {
            let range = segs.range(b);
            for j in 0..cols {
                let mut col: Vec<f64> = range.clone().map(|r| t.get(r, j)).collect();
                crate::tensor::softmax_in_place(&mut col);
                for (r, v) in range.clone().zip(col) {
                    out.row_mut(r)[j] = v;
                }
            }
        }
        self.push(out, Op::SegmentSoftmax(a, segs.clone()))
    }

    /// Records a scalar whose gradients were computed with it.
    pub fn scalar_loss(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &grads {
            self.val(*v)?.same_shape(g, "scalar_loss")?;
        }
        self.push(Tensor::scalar(value), Op::ScalarLoss(grads))
    }

    /// Sum over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.val(logits)?;
        if t.rank() != 2 || t.rows() != labels.len() {
            return arg(format!(
                "cross entropy over shape {:?} with {} labels",
                t.shape(),
                labels.len()
            ));
        }
        let mut grad = Tensor::zeros(t.shape());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= t.cols() {
                return arg(format!("label {y} out of {} classes", t.cols()));
            }
            let mut p = t.row(r).to_vec();
            crate::tensor::softmax_in_place(&mut p);
            loss += crate::tensor::log_sum_exp(t.row(r)) - t.get(r, y);
            p[y] -= 1.0;
            grad.row_mut(r).copy_from_slice(&p);
        }
        self.scalar_loss(loss, vec![(logits, grad)])
    }

    /// Gradients of the scalar `loss` with respect to every parameter used
    /// on this tape, indexed like `store`.
    pub fn gradients(&self, loss: Var, num_params: usize) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return arg(format!("loss must be scalar, got shape {:?}", node.value.shape()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.idx).map(|_| None).collect();
        adj[loss.idx] = Some(Tensor::full(node.value.shape(), 1.0));
        let mut out = Gradients::empty(num_params);
        for idx in (0..=loss.idx).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, g, &mut adj, &mut out)?;
        }
        Ok(out)
    }

    /// Accumulates `∂loss/∂θ` into the `grad` of every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.gradients(loss, store.len())?;
        store.accumulate(&g)
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        adj: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let v = |x: Var| &self.nodes[x.idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g)?,
            Op::MatMul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let da = g.matmul_t(bv)?;
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, false);
                acc(adj, *a, da)?;
                acc(adj, *b, Tensor::matrix(k, n, db)?)?;
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let da = g.matmul(bv)?;
                let mut db = vec![0.0; n * k];
                gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), &mut db, false);
                acc(adj, *a, da)?;
                acc(adj, *b, Tensor::matrix(n, k, db)?)?;
            }
            Op::Add(a, b) => {
                acc(adj, *b, g.clone())?;
                acc(adj, *a, g)?;
            }
            Op::Sub(a, b) => {
                acc(adj, *b, g.scale(-1.0))?;
                acc(adj, *a, g)?;
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g.mul(v(*b))?)?;
                acc(adj, *b, g.mul(v(*a))?)?;
            }
            Op::Div(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                acc(adj, *a, g.zip_map(bv, "div", |d, y| d / y)?)?;
                let mut db = g.mul(av)?;
                for (x, y) in db.data_mut().iter_mut().zip(bv.data()) {
                    *x = -*x / (y * y);
                }
                acc(adj, *b, db)?;
            }
            Op::AddRow(a, b) => {
                let mut db = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (d, x) in db.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(adj, *b, Tensor::new(v(*b).shape().to_vec(), db)?)?;
                acc(adj, *a, g)?;
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (v(*a), v(*c));
                let mut da = g.clone();
                let mut dc = vec![0.0; cv.len()];
                for r in 0..g.rows() {
                    let s = cv.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    dc[r] = crate::tensor::dot(g.row(r), av.row(r));
                }
                acc(adj, *a, da)?;
                acc(adj, *c, Tensor::new(cv.shape().to_vec(), dc)?)?;
            }
            Op::Scale(a, s) => acc(adj, *a, g.scale(*s))?,
            Op::Sigmoid(a) => {
                let da = g.zip_map(&node.value, "sigmoid", |d, y| d * y * (1.0 - y))?;
                acc(adj, *a, da)?;
            }
            Op::Tanh(a) => {
                let da = g.zip_map(&node.value, "tanh", |d, y| d * (1.0 - y * y))?;
                acc(adj, *a, da)?;
            }
            Op::Exp(a) => acc(adj, *a, g.mul(&node.value)?)?,
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(adj, *a, Tensor::full(v(*a).shape(), s))?;
            }
            Op::Reshape(a) => acc(adj, *a, g.reshape(v(*a).shape())?)?,
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = v(p).rows();
                    let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                    acc(adj, p, Tensor::matrix(rows, cols, data)?)?;
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = (v(p).rows(), v(p).cols());
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    acc(adj, p, Tensor::matrix(rows, w, data)?)?;
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut da = Tensor::zeros(v(*a).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                acc(adj, *a, da)?;
            }
            Op::GatherRows(a, rows) => {
                let mut da = Tensor::zeros(v(*a).shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(adj, *a, da)?;
            }
            Op::ShiftRows(a, offset, segs) => {
                let mut da = Tensor::zeros(g.shape());
                for r in 0..g.rows() {
                    if let Some(src) = segs.shifted(r, *offset) {
                        for (d, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
                acc(adj, *a, da)?;
            }
            Op::SegmentSum(a, segs) | Op::SegmentMean(a, segs) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                let mut da = Tensor::zeros(v(*a).shape());
                for b in 0..segs.count() {
                    let s = if mean { 1.0 / segs.len_of(b) as f64 } else { 1.0 };
                    for r in segs.range(b) {
                        for (d, x) in da.row_mut(r).iter_mut().zip(g.row(b)) {
                            *d = x * s;
                        }
                    }
                }
                acc(adj, *a, da)?;
            }
            Op::Broadcast(a, segs) => {
                let da = segment_reduce(&g, segs, false)?;
                acc(adj, *a, da)?;
            }
            Op::RepeatRow(a) => {
                let mut dv = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (d, x) in dv.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(adj, *a, Tensor::vector(dv))?;
            }
            Op::SelectRows(new, old, mask) => {
                let mut dn = Tensor::zeros(g.shape());
                let mut d_old = g;
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        dn.row_mut(r).copy_from_slice(d_old.row(r));
                        d_old.row_mut(r).fill(0.0);
                    }
                }
                acc(adj, *new, dn)?;
                acc(adj, *old, d_old)?;
            }
            Op::SoftmaxGroup(inputs) => {
                let k = inputs.len();
                let len = node.value.len() / k;
                let (y, dy) = (node.value.data(), g.data());
                let mut dx = vec![vec![0.0; len]; k];
                for j in 0..len {
                    let mut s = 0.0;
                    for m in 0..k {
                        s += y[m * len + j] * dy[m * len + j];
                    }
                    for m in 0..k {
                        dx[m][j] = y[m * len + j] * (dy[m * len + j] - s);
                    }
                }
                for (&x, d) in inputs.iter().zip(dx) {
                    acc(adj, x, Tensor::new(v(x).shape().to_vec(), d)?)?;
                }
            }
            Op::GatedCell {
                pre,
                c,
                extra,
                spec,
                segs,
                saved,
            } => {
                let half = g.len() / 2;
                let grads = cell::backward(
                    spec,
                    v(*c),
                    extra.map(v),
                    segs,
                    saved,
                    &g.data()[..half],
                    &g.data()[half..],
                )?;
                acc(adj, *pre, grads.pre)?;
                acc(adj, *c, grads.c)?;
                if let (Some(e), Some(dx)) = (extra, grads.extra) {
                    acc(adj, *e, dx)?;
                }
            }
            Op::Pick(group, m) => {
                let gv = v(*group);
                let len = g.len();
                let slot = adj[group.idx].get_or_insert_with(|| Tensor::zeros(gv.shape()));
                for (d, x) in slot.data_mut()[m * len..(m + 1) * len].iter_mut().zip(g.data()) {
                    *d += x;
                }
            }
            Op::SegmentSoftmax(a, segs) => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.shape());
                for b in 0..segs.count() {
                    for j in 0..y.cols() {
                        let s: f64 = segs.range(b).map(|r| y.get(r, j) * g.get(r, j)).sum();
                        for r in segs.range(b) {
                            da.row_mut(r)[j] = y.get(r, j) * (g.get(r, j) - s);
                        }
                    }
                }
                acc(adj, *a, da)?;
            }
            Op::ScalarLoss(grads) => {
                let s = g.data()[0];
                for (x, d) in grads {
                    acc(adj, *x, d.scale(s))?;
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.idx] {
        Some(a) => a.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn check_rows(op: &'static str, t: &Tensor, segs: &Segments) -> Result<()> {
    if t.rank() != 2 || t.rows() != segs.total_rows() {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![segs.total_rows()],
        });
    }
    Ok(())
}

fn segment_reduce(t: &Tensor, segs: &Segments, mean: bool) -> Result<Tensor> {
    check_rows("segment_reduce", t, segs)?;
    let cols = t.cols();
    let mut out = Tensor::zeros(&[segs.count(), cols]);
    for b in 0..segs.count() {
        let row = out.row_mut(b);
        for r in segs.range(b) {
            for (o, x) in row.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        if mean {
            let inv = 1.0 / segs.len_of(b) as f64;
            row.iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok(out)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulCol(..) => "mul_col",
        Op::Scale(..) => "scale",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Exp(_) => "exp",
        Op::Sum(_) => "sum",
        Op::Reshape(_) => "reshape",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::ShiftRows(..) => "shift_rows",
        Op::SegmentSum(..) => "segment_sum",
        Op::SegmentMean(..) => "segment_mean",
        Op::Broadcast(..) => "broadcast",
        Op::RepeatRow(_) => "repeat_row",
        Op::SelectRows(..) => "select_rows",
        Op::SoftmaxGroup(_) => "softmax_group",
        Op::Pick(..) => "pick",
        Op::GatedCell { .. } => "gated_cell",
        Op::SegmentSoftmax(..) => "segment_softmax",
        Op::ScalarLoss(_) => "scalar_loss",
    }
}
