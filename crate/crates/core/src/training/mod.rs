//! Optimisation: Adam with per-epoch decay, gradient clipping, inverted
//! dropout, L2 and length-bucketed batching.

pub mod checkpoint;
pub mod config;

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape};
use crate::data::metrics::accuracy;
use crate::error::{arg, Error, Result};
use crate::model::{Dropout, Instance, Model, Target};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{ClipMode, TrainConfig};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Mixes `parts` into one seed (splitmix64 finaliser over a running state).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return arg(format!("dropout rate {rate} outside [0, 1)"));
    }
    let n: usize = shape.iter().product();
    if rate == 0.0 {
        return Tensor::new(shape.to_vec(), vec![1.0; n]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    Tensor::new(shape.to_vec(), data)
}

/// `lr · decay^epoch`, epochs counted from 0.
pub fn effective_lr(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr * config.lr_decay.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::State(format!(
                "optimiser state for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (p, (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::State(format!("moment shape mismatch for {}", p.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of the parameters in `ids` from their
/// `grad` buffers. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], state: &mut AdamState, lr: f64) -> Result<()> {
    state.check(store)?;
    for &id in ids {
        let p = store.get(id);
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for &id in ids {
        let p = store.get_mut(id);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let g = p.grad.data();
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *theta -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied under global-norm clipping (1 if untouched).
    pub scale: f64,
    pub clipped: bool,
}

pub fn clip_gradients(store: &mut ParamStore, ids: &[ParamId], clip: f64, mode: ClipMode) -> ClipReport {
    let norm = ids.iter().map(|&id| store.get(id).grad.norm_sq()).sum::<f64>().sqrt();
    match mode {
        ClipMode::GlobalNorm => {
            if norm > clip {
                let scale = clip / norm;
                for &id in ids {
                    store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= scale);
                }
                ClipReport { norm, scale, clipped: true }
            } else {
                ClipReport { norm, scale: 1.0, clipped: false }
            }
        }
        ClipMode::Value => {
            let mut clipped = false;
            for &id in ids {
                for g in store.get_mut(id).grad.data_mut() {
                    if g.abs() > clip {
                        *g = g.signum() * clip;
                        clipped = true;
                    }
                }
            }
            ClipReport { norm, scale: 1.0, clipped }
        }
    }
}

/// `l2 · Σθ² / 2` over `ids`.
pub fn l2_penalty(store: &ParamStore, ids: &[ParamId], l2: f64) -> f64 {
    0.5 * l2 * ids.iter().map(|&id| store.value(id).norm_sq()).sum::<f64>()
}

/// Adds `l2 · θ` to each gradient of `ids`.
pub fn add_l2_gradient(store: &mut ParamStore, ids: &[ParamId], l2: f64) {
    if l2 == 0.0 {
        return;
    }
    for &id in ids {
        let p = store.get_mut(id);
        for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += l2 * v;
        }
    }
}

/// Indices sorted by length (stable) and cut into contiguous batches.
pub fn length_buckets(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn trainable(inst: &Instance) -> bool {
    !matches!(&inst.target, Target::Tags(t) if t.is_empty())
}

/// Summed NLL and its gradients for `batch`, split into at most `workers`
/// contiguous chunks evaluated concurrently. Chunk results are merged in
/// chunk order, so the outcome depends only on the worker count.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[&Instance],
    dropout: Option<&Dropout>,
    workers: usize,
) -> Result<(f64, Gradients)> {
    let run = |part: &[&Instance], drop: Option<Dropout>| -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, store, part, drop.as_ref())?;
        let loss = model.loss(&mut tape, store, &enc, part)?;
        Ok((tape.value(loss).item()?, tape.gradients(loss, store.len())?))
    };
    let slice_drop = |range: std::ops::Range<usize>| {
        dropout.map(|d| Dropout {
            rate: d.rate,
            seeds: d.seeds[range].to_vec(),
        })
    };
    let workers = workers.clamp(1, batch.len().max(1));
    if workers == 1 {
        return run(batch, slice_drop(0..batch.len()));
    }
    let chunk = batch.len().div_ceil(workers);
    let results: Vec<Result<(f64, Gradients)>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                let start = k * chunk;
                let drop = slice_drop(start..start + part.len());
                let run = &run;
                s.spawn(move || run(part, drop))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = 0.0;
    let mut grads = Gradients::empty(store.len());
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.merge(g)?;
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub adam: Option<AdamState>,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            adam: Some(AdamState::new(store)),
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// Zero-based epoch index.
    pub epoch: usize,
    /// Mean over batches of per-example NLL plus the L2 term.
    pub loss: f64,
    /// Mean per-example NLL.
    pub nll: f64,
    pub lr: f64,
    pub batches: usize,
    pub skipped_batches: usize,
    pub clipped_batches: usize,
    pub seconds: f64,
}

/// One pass over `data`. Batch gradients are averaged over the batch's
/// examples; the L2 gradient is added once per batch before clipping.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore,
    data: &[Instance],
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochMetrics> {
    config.validate()?;
    if data.is_empty() {
        return arg("empty training set");
    }
    let start = Instant::now();
    let epoch = state.epoch;
    let lr = effective_lr(config, epoch);
    let ids = model.trainable(store);
    let adam = state.adam.get_or_insert_with(|| AdamState::new(store));

    let lengths: Vec<usize> = data.iter().map(|i| i.tokens.len()).collect();
    let mut batches = length_buckets(&lengths, config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64, 0xBA7C]));
    batches.shuffle(&mut rng);

    let (mut loss_sum, mut nll_sum, mut examples) = (0.0, 0.0, 0usize);
    let (mut done, mut skipped, mut clipped) = (0, 0, 0);
    for batch in &batches {
        let members: Vec<usize> = batch.iter().copied().filter(|&i| trainable(&data[i])).collect();
        if members.is_empty() {
            skipped += 1;
            continue;
        }
        let refs: Vec<&Instance> = members.iter().map(|&i| &data[i]).collect();
        let dropout = Dropout {
            rate: config.dropout,
            seeds: members
                .iter()
                .map(|&i| derive_seed(&[config.seed, epoch as u64, i as u64]))
                .collect(),
        };
        let (nll, grads) = batch_gradients(model, store, &refs, Some(&dropout), config.workers)?;
        let b = refs.len() as f64;
        store.zero_grad();
        store.accumulate(&grads)?;
        for &id in &ids {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g /= b);
        }
        let penalty = l2_penalty(store, &ids, config.l2);
        add_l2_gradient(store, &ids, config.l2);
        if clip_gradients(store, &ids, config.clip_norm, config.clip_mode).clipped {
            clipped += 1;
        }
        adam_step(store, &ids, adam, lr)?;
        loss_sum += nll / b + penalty;
        nll_sum += nll;
        examples += refs.len();
        done += 1;
    }
    if skipped > 0 {
        warn!("skipped {skipped} empty batches in epoch {epoch}");
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch,
        loss: if done > 0 { loss_sum / done as f64 } else { 0.0 },
        nll: if examples > 0 { nll_sum / examples as f64 } else { 0.0 },
        lr,
        batches: done,
        skipped_batches: skipped,
        clipped_batches: clipped,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Objective value `NLL/B + l2·Σθ²/2` of one batch at the current
/// parameters, without dropout.
pub fn batch_objective(model: &Model, store: &ParamStore, batch: &[&Instance], l2: f64) -> Result<(f64, f64)> {
    let (nll, _) = batch_gradients(model, store, batch, None, 1)?;
    let nll = nll / batch.len() as f64;
    Ok((nll, nll + l2_penalty(store, &model.trainable(store), l2)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Target>,
    /// Example accuracy for classification, token accuracy for tagging,
    /// in percent.
    pub accuracy: f64,
}

/// Predictions over `data` in batches of `eval_batch`; batches are spread
/// over `workers` threads and reassembled in order.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[Instance], config: &TrainConfig) -> Result<Evaluation> {
    let chunks: Vec<&[Instance]> = data.chunks(config.eval_batch.max(1)).collect();
    let workers = config.workers.clamp(1, chunks.len().max(1));
    let per = chunks.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Target>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                s.spawn(move || -> Result<Vec<Target>> {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(predict_chunk(model, store, c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut predictions = Vec::with_capacity(data.len());
    for p in parts {
        predictions.extend(p?);
    }
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (p, inst) in predictions.iter().zip(data) {
        match (p, &inst.target) {
            (Target::Class(a), Target::Class(b)) => {
                pred.push(*a);
                gold.push(*b);
            }
            (Target::Tags(a), Target::Tags(b)) => {
                pred.extend_from_slice(a);
                gold.extend_from_slice(b);
            }
            _ => return Err(Error::State("prediction kind differs from target kind".into())),
        }
    }
    Ok(Evaluation {
        accuracy: accuracy(&pred, &gold),
        predictions,
    })
}

fn predict_chunk(model: &Model, store: &ParamStore, chunk: &[Instance]) -> Result<Vec<Target>> {
    // Sentences without words have nothing to predict.
    let keep: Vec<&Instance> = chunk.iter().filter(|i| trainable(i)).collect();
    let mut predicted = if keep.is_empty() {
        Vec::new()
    } else {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, store, &keep, None)?;
        model.predict(&mut tape, store, &enc)?
    }
    .into_iter();
    Ok(chunk
        .iter()
        .map(|i| {
            if trainable(i) {
                predicted.next().expect("one prediction per kept instance")
            } else {
                Target::Tags(Vec::new())
            }
        })
        .collect())
}
