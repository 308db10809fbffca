//! Linear-chain CRF whose potentials depend on the label pair:
//! `ψ_i(p, c) = exp(W_s[p,c] · h_i + b_s[p,c])`.
//!
//! Labels are `0..L`. A START label (index `L`) precedes the first position
//! and a terminal STOP pair `b_s[y_n, STOP]` closes every path; the STOP
//! pair has no weight vector.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Segments, Tape, Var};
use crate::error::{arg, Result};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct CrfParams {
    /// `(L+1)·L × input`: row `p·L + c` scores the pair `(p, c)` with
    /// `p = L` standing for START.
    pub w: ParamId,
    /// `(L+1) × (L+1)`: column `L` holds the STOP biases.
    pub b: ParamId,
    pub labels: usize,
    pub input_size: usize,
}

impl CrfParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if labels == 0 || input_size == 0 {
            return arg("CRF needs at least one label and a positive input size");
        }
        let pairs = (labels + 1) * labels;
        Ok(Self {
            w: store.add_glorot(format!("{prefix}.W_s"), pairs, input_size, rng)?,
            b: store.add(format!("{prefix}.b_s"), Tensor::zeros(&[labels + 1, labels + 1]))?,
            labels,
            input_size,
        })
    }

    pub fn start(&self) -> usize {
        self.labels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// Taped negative log-likelihood summed over the sentences of `segs`.
    /// `h` holds one row per labelled token (boundary rows removed).
    pub fn nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        segs: &Arc<Segments>,
        gold: &[Vec<usize>],
    ) -> Result<Var> {
        if gold.len() != segs.count() {
            return arg(format!("{} label sequences for {} sentences", gold.len(), segs.count()));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let emit = tape.matmul_t(h, w)?;
        let e = tape.value(emit);
        let bias = tape.value(b);
        let mut total = 0.0;
        let mut de = Tensor::zeros(e.shape());
        let mut db = Tensor::zeros(bias.shape());
        for (s, labels) in gold.iter().enumerate() {
            let range = segs.range(s);
            let scores = CrfScores::from_rows(e, range.clone(), bias, self.labels)?;
            total += scores.nll(labels)?;
            scores.accumulate_gradient(labels, &mut de, range.start, &mut db)?;
        }
        tape.scalar_loss(total, vec![(emit, de), (b, db)])
    }

    /// Best label sequence for each sentence.
    pub fn decode_batch(&self, tape: &Tape, store: &ParamStore, h: Var, segs: &Segments) -> Result<Vec<Vec<usize>>> {
        let e = tape.value(h).matmul_t(store.value(self.w))?;
        let bias = store.value(self.b);
        (0..segs.count())
            .map(|s| Ok(CrfScores::from_rows(&e, segs.range(s), bias, self.labels)?.viterbi()))
            .collect()
    }
}

/// All pair scores of one sentence.
#[derive(Clone, Debug)]
pub struct CrfScores {
    labels: usize,
    /// `emit[i][p][c]` for `i < n`, `p ≤ L` (START = L), `c < L`.
    emit: Vec<Vec<Vec<f64>>>,
    /// `stop[c]`
    stop: Vec<f64>,
}

impl CrfScores {
    /// Scores for one sentence of word states `word_h` (`n × input`).
    pub fn compute(word_h: &Tensor, params: &CrfParams, store: &ParamStore) -> Result<Self> {
        if word_h.rank() != 2 || word_h.rows() == 0 || word_h.cols() != params.input_size {
            return arg(format!(
                "CRF: states of shape {:?} for input size {}",
                word_h.shape(),
                params.input_size
            ));
        }
        let e = word_h.matmul_t(store.value(params.w))?;
        Self::from_rows(&e, 0..e.rows(), store.value(params.b), params.labels)
    }

    fn from_rows(e: &Tensor, rows: std::ops::Range<usize>, bias: &Tensor, labels: usize) -> Result<Self> {
        if rows.is_empty() {
            return arg("CRF over an empty sentence");
        }
        let l = labels;
        let emit = rows
            .map(|r| {
                let row = e.row(r);
                (0..=l)
                    .map(|p| (0..l).map(|c| row[p * l + c] + bias.get(p, c)).collect())
                    .collect()
            })
            .collect();
        let stop = (0..l).map(|c| bias.get(c, l)).collect();
        Ok(Self { labels, emit, stop })
    }

    pub fn len(&self) -> usize {
        self.emit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emit.is_empty()
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Score of pair `(prev, cur)` at position `i`; `prev = None` is START.
    pub fn pair(&self, i: usize, prev: Option<usize>, cur: usize) -> f64 {
        self.emit[i][prev.unwrap_or(self.labels)][cur]
    }

    pub fn stop(&self, label: usize) -> f64 {
        self.stop[label]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.len() {
            return arg(format!("{} labels for {} positions", labels.len(), self.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.labels) {
            return arg(format!("label {bad} out of {} labels", self.labels));
        }
        Ok(())
    }

    /// Unnormalised log score of a label sequence.
    pub fn path_score(&self, labels: &[usize]) -> Result<f64> {
        self.check_labels(labels)?;
        let mut s = self.pair(0, None, labels[0]);
        for i in 1..labels.len() {
            s += self.pair(i, Some(labels[i - 1]), labels[i]);
        }
        Ok(s + self.stop[labels[labels.len() - 1]])
    }

    fn forward(&self) -> Vec<Vec<f64>> {
        let l = self.labels;
        let mut alpha = vec![self.emit[0][l].clone()];
        let mut buf = vec![0.0; l];
        for i in 1..self.len() {
            let prev = &alpha[i - 1];
            let next = (0..l)
                .map(|c| {
                    for p in 0..l {
                        buf[p] = prev[p] + self.emit[i][p][c];
                    }
                    log_sum_exp(&buf)
                })
                .collect();
            alpha.push(next);
        }
        alpha
    }

    fn backward(&self) -> Vec<Vec<f64>> {
        let l = self.labels;
        let n = self.len();
        let mut beta = vec![Vec::new(); n];
        beta[n - 1] = self.stop.clone();
        let mut buf = vec![0.0; l];
        for i in (0..n - 1).rev() {
            beta[i] = (0..l)
                .map(|p| {
                    for c in 0..l {
                        buf[c] = self.emit[i + 1][p][c] + beta[i + 1][c];
                    }
                    log_sum_exp(&buf)
                })
                .collect();
        }
        beta
    }

    pub fn log_partition(&self) -> f64 {
        let alpha = self.forward();
        let last = &alpha[self.len() - 1];
        let terms: Vec<f64> = last.iter().zip(&self.stop).map(|(a, s)| a + s).collect();
        log_sum_exp(&terms)
    }

    /// `−log P(labels)`.
    pub fn nll(&self, labels: &[usize]) -> Result<f64> {
        let gold = self.path_score(labels)?;
        Ok((self.log_partition() - gold).max(0.0))
    }

    /// Adds `∂nll/∂emission` into rows `offset..offset+n` of `de`
    /// (`· × (L+1)L`) and `∂nll/∂b_s` into `db`.
    fn accumulate_gradient(&self, labels: &[usize], de: &mut Tensor, offset: usize, db: &mut Tensor) -> Result<()> {
        self.check_labels(labels)?;
        let l = self.labels;
        let n = self.len();
        let alpha = self.forward();
        let beta = self.backward();
        let last: Vec<f64> = alpha[n - 1].iter().zip(&self.stop).map(|(a, s)| a + s).collect();
        let log_z = log_sum_exp(&last);
        let bw = l + 1;
        for i in 0..n {
            let row = de.row_mut(offset + i);
            let sources: Vec<usize> = if i == 0 { vec![l] } else { (0..l).collect() };
            for &p in &sources {
                let a = if i == 0 { 0.0 } else { alpha[i - 1][p] };
                for c in 0..l {
                    let m = (a + self.emit[i][p][c] + beta[i][c] - log_z).exp();
                    row[p * l + c] += m;
                    db.data_mut()[p * bw + c] += m;
                }
            }
            let p = if i == 0 { l } else { labels[i - 1] };
            row[p * l + labels[i]] -= 1.0;
            db.data_mut()[p * bw + labels[i]] -= 1.0;
        }
        for c in 0..l {
            db.data_mut()[c * bw + l] += (last[c] - log_z).exp();
        }
        db.data_mut()[labels[n - 1] * bw + l] -= 1.0;
        Ok(())
    }

    /// Highest scoring sequence; ties go to the smaller label index.
    pub fn viterbi(&self) -> Vec<usize> {
        let l = self.labels;
        let n = self.len();
        let mut delta = self.emit[0][l].clone();
        let mut back = Vec::with_capacity(n);
        for i in 1..n {
            let mut next = vec![0.0; l];
            let mut ptr = vec![0; l];
            for c in 0..l {
                let mut best = 0;
                let mut score = delta[0] + self.emit[i][0][c];
                for p in 1..l {
                    let s = delta[p] + self.emit[i][p][c];
                    if s > score {
                        score = s;
                        best = p;
                    }
                }
                next[c] = score;
                ptr[c] = best;
            }
            back.push(ptr);
            delta = next;
        }
        let finals: Vec<f64> = delta.iter().zip(&self.stop).map(|(d, s)| d + s).collect();
        let mut y = super::argmax(&finals);
        let mut path = vec![y];
        for ptr in back.iter().rev() {
            y = ptr[y];
            path.push(y);
        }
        path.reverse();
        path
    }
}

/// `−log P(labels | word_h)` for one sentence.
pub fn crf_nll(word_h: &Tensor, labels: &[usize], params: &CrfParams, store: &ParamStore) -> Result<f64> {
    CrfScores::compute(word_h, params, store)?.nll(labels)
}

pub fn crf_decode(word_h: &Tensor, params: &CrfParams, store: &ParamStore) -> Result<Vec<usize>> {
    Ok(CrfScores::compute(word_h, params, store)?.viterbi())
}
