use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use slstm_core::autodiff::ParamStore;
use slstm_core::bilstm;
use slstm_core::slstm::{infer, SLstmConfig, SLstmParams};
use slstm_core::tensor::Tensor;

use crate::args::BenchArgs;

pub const CSV_HEADER: &str = "encoder,length,workers,steps,sec_per_token,speedup";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub encoder: String,
    pub length: usize,
    pub workers: usize,
    /// Sequential recurrent updates per sentence: `T` for S-LSTM, `n + 1`
    /// per direction for BiLSTM.
    pub steps: usize,
    pub sec_per_token: f64,
    /// Time at the first listed worker count over time at this one.
    pub speedup: f64,
}

/// Shortest wall-clock time of one sample; short calls are repeated within
/// a sample.
const MIN_SAMPLE_SECS: f64 = 0.1;

type Job<'a> = Box<dyn Fn() -> slstm_core::Result<()> + 'a>;

/// Seconds per call of every job: after a warm-up call that also sizes the
/// samples, `repeats` rounds take one sample of each job in turn, so slow
/// drift of the host affects all jobs alike. The fastest sample counts.
fn fastest(repeats: usize, jobs: &[Job<'_>]) -> Result<Vec<f64>> {
    let mut calls = Vec::with_capacity(jobs.len());
    for job in jobs {
        let t = Instant::now();
        job()?;
        let once = t.elapsed().as_secs_f64().max(1e-9);
        calls.push(((MIN_SAMPLE_SECS / once).ceil() as usize).max(1));
    }
    let mut best = vec![f64::INFINITY; jobs.len()];
    for _ in 0..repeats.max(1) {
        for (k, job) in jobs.iter().enumerate() {
            let t = Instant::now();
            for _ in 0..calls[k] {
                job()?;
            }
            best[k] = best[k].min(t.elapsed().as_secs_f64() / calls[k] as f64);
        }
    }
    Ok(best)
}

pub fn measure(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    if args.workers.is_empty() || args.lengths.is_empty() {
        bail!("at least one length and one worker count are required");
    }
    if let Some(other) = args.encoders.iter().find(|e| !matches!(e.as_str(), "slstm" | "bilstm")) {
        bail!("unknown encoder {other:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut store = ParamStore::new();
    let d = args.hidden;
    let slstm = SLstmParams::register(
        &mut store,
        "slstm",
        SLstmConfig {
            hidden_size: d,
            steps: args.steps,
            window: args.window,
            sentence_nodes: args.nodes,
            input_size: d,
        },
        &mut rng,
    )?;
    let layers = bilstm::register_stack(&mut store, "bilstm", d, d, 1, &mut rng)?;
    let inputs: Vec<Vec<Tensor>> = args
        .lengths
        .iter()
        .map(|&length| {
            (0..args.batch.max(1))
                .map(|_| Tensor::uniform(&[length + 2, d], 1.0, &mut rng))
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut jobs: Vec<Job<'_>> = Vec::new();
    for encoder in &args.encoders {
        for (&length, sentences) in args.lengths.iter().zip(&inputs) {
            for &workers in &args.workers {
                let (slstm, layers, store) = (&slstm, &layers, &store);
                let (job, steps): (Job<'_>, usize) = if encoder == "slstm" {
                    let job = move || {
                        for s in sentences {
                            infer::encode_parallel(s, slstm, store, workers)?;
                        }
                        Ok(())
                    };
                    (Box::new(job), args.steps)
                } else {
                    let job = move || bilstm::stack_batch(layers, sentences, store, workers).map(drop);
                    (Box::new(job), length + 1)
                };
                jobs.push(job);
                rows.push(BenchRow {
                    encoder: encoder.clone(),
                    length,
                    workers,
                    steps,
                    sec_per_token: 0.0,
                    speedup: 1.0,
                });
            }
        }
    }
    let secs = fastest(args.repeats, &jobs)?;
    for (group, times) in rows.chunks_mut(args.workers.len()).zip(secs.chunks(args.workers.len())) {
        let tokens = (args.batch.max(1) * group[0].length) as f64;
        for (row, t) in group.iter_mut().zip(times) {
            row.sec_per_token = t / tokens;
            row.speedup = times[0] / t;
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6e},{:.4}",
            r.encoder, r.length, r.workers, r.steps, r.sec_per_token, r.speedup
        );
    }
    s
}

pub fn run(args: &BenchArgs) -> Result<i32> {
    let rows = measure(args)?;
    let csv = to_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &csv)?,
        None if !args.json => print!("{csv}"),
        None => {}
    }
    if args.json {
        for r in &rows {
            println!("{}", json!({"event": "bench", "row": r}));
        }
    }
    Ok(0)
}
