use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use slstm_core::autodiff::{grad_check_with, GradCheckOptions, GradCheckReport, ParamStore, Tape};
use slstm_core::model::{EncoderKind, HeadKind, Instance, Model, TaskKind, Target};
use slstm_core::tensor::Tensor;
use slstm_core::training::TrainConfig;

use crate::args::GradcheckArgs;

const VOCAB: usize = 12;
const LABELS: usize = 3;

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    /// `None` is the constant-loss fixture.
    pub config: Option<TrainConfig>,
}

pub fn variants(args: &GradcheckArgs) -> Vec<Variant> {
    let base = TrainConfig {
        hidden: args.hidden,
        emb_dim: args.hidden,
        steps: args.steps,
        attn_size: 3,
        dropout: 0.0,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    let mut push = |name: String, c: TrainConfig| out.push(Variant { name, config: Some(c) });
    for window in [1, 2] {
        for nodes in [0, 1, 2] {
            push(format!("slstm-w{window}-m{nodes}-softmax"), TrainConfig { window, nodes, ..base.clone() });
        }
    }
    for layers in [1, 2] {
        push(
            format!("bilstm-l{layers}-softmax"),
            TrainConfig {
                encoder: EncoderKind::BiLstm,
                layers,
                ..base.clone()
            },
        );
    }
    for encoder in [EncoderKind::SLstm, EncoderKind::BiLstm] {
        let e = encoder.name();
        push(format!("{e}-attn"), TrainConfig { encoder, head: HeadKind::Attention, ..base.clone() });
        for head in [HeadKind::Crf, HeadKind::Softmax] {
            push(
                format!("{e}-tagging-{}", head.name()),
                TrainConfig {
                    encoder,
                    head,
                    task: TaskKind::Tagging,
                    ..base.clone()
                },
            );
        }
    }
    out.push(Variant {
        name: "constant-loss".into(),
        config: None,
    });
    out
}

fn instances(task: TaskKind, length: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = [length.max(1), length.saturating_sub(2).max(1)];
    lengths
        .iter()
        .map(|&n| {
            let mut tokens = vec![slstm_core::data::BOS];
            tokens.extend((0..n).map(|_| rng.gen_range(4..VOCAB)));
            tokens.push(slstm_core::data::EOS);
            let target = match task {
                TaskKind::Classification => Target::Class(rng.gen_range(0..LABELS)),
                TaskKind::Tagging => Target::Tags((0..n).map(|_| rng.gen_range(0..LABELS)).collect()),
            };
            Instance { tokens, target }
        })
        .collect()
}

pub fn check(variant: &Variant, args: &GradcheckArgs) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        eps: args.eps,
        tol: args.tol,
        corrupt: args.corrupt_param.clone().map(|p| (p, args.corrupt_factor)),
        five_point: args.five_point,
    };
    let Some(config) = &variant.config else {
        let mut store = ParamStore::new();
        store.add("constant.w", Tensor::vector(vec![0.3, -0.7]))?;
        return Ok(grad_check_with(
            &mut store,
            |_| {
                let mut tape = Tape::new();
                let loss = tape.constant(Tensor::scalar(1.25));
                Ok((tape, loss))
            },
            &opts,
        )?);
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::register(config.model_config(VOCAB, LABELS), &mut store, &mut rng, None)?;
    // Initial weights are small enough that many adjoints sit near the
    // finite-difference noise floor, so every tensor is redrawn at `scale`.
    for p in store.iter_mut() {
        p.value = Tensor::uniform(p.value.shape(), args.scale, &mut rng);
    }
    let data = instances(config.task, args.length, config.seed);
    let refs: Vec<&Instance> = data.iter().collect();
    Ok(grad_check_with(
        &mut store,
        |s| {
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, s, &refs, None)?;
            let loss = model.loss(&mut tape, s, &enc, &refs)?;
            Ok((tape, loss))
        },
        &opts,
    )?)
}

pub fn sweep(args: &GradcheckArgs) -> Result<Vec<(Variant, GradCheckReport)>> {
    variants(args)
        .into_iter()
        .filter(|v| args.only.as_deref().map_or(true, |o| v.name.contains(o)))
        .map(|v| {
            let r = check(&v, args)?;
            Ok((v, r))
        })
        .collect()
}

pub fn run(args: &GradcheckArgs) -> Result<i32> {
    let results = sweep(args)?;
    let mut failed = 0;
    if !args.json {
        println!("{:<26} {:<24} {:>12} {:>8}  status", "variant", "parameter", "max_rel_err", "worst");
    }
    for (variant, report) in &results {
        for p in &report.params {
            let ok = p.max_rel_err < report.tol;
            if !ok {
                failed += 1;
            }
            if args.json {
                let line = json!({
                    "event": "gradcheck", "variant": variant.name, "param": p.name,
                    "max_rel_err": p.max_rel_err, "worst_index": p.worst_index,
                    "analytic": p.analytic, "numeric": p.numeric, "passed": ok,
                });
                println!("{line}");
            } else {
                println!(
                    "{:<26} {:<24} {:>12.3e} {:>8}  {}",
                    variant.name,
                    p.name,
                    p.max_rel_err,
                    p.worst_index,
                    if ok { "ok" } else { "FAIL" }
                );
            }
        }
    }
    let worst = results.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max);
    if args.json {
        println!("{}", json!({"event": "summary", "variants": results.len(), "failures": failed, "max_rel_err": worst}));
    } else {
        println!("{} variants, {failed} failing parameters, max relative error {worst:.3e}", results.len());
        for (variant, report) in &results {
            for p in report.failures() {
                eprintln!(
                    "gradient mismatch in {} / {} at coordinate {}: analytic {:.6e}, numeric {:.6e}",
                    variant.name, p.name, p.worst_index, p.analytic, p.numeric
                );
            }
        }
    }
    Ok(if failed == 0 { 0 } else { 1 })
}
