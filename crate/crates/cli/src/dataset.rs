//! Dataset preparation shared by the commands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use slstm_core::data::metrics::{span_f1, SpanScores};
use slstm_core::data::tags::split_tag;
use slstm_core::data::{self, synth, ConllOptions, Labels, Vocab, UNK};
use slstm_core::model::{Instance, TaskKind, Target};
use slstm_core::tensor::Tensor;
use slstm_core::training::{Evaluation, TrainConfig};

use crate::args::{FormatFlags, TrainArgs};

pub struct Prepared {
    pub vocab: Vocab,
    pub labels: Labels,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub embeddings: Option<Tensor>,
    pub info: BTreeMap<String, String>,
}

fn format_of(flags: &FormatFlags, task: TaskKind) -> &str {
    match (flags.format.as_deref(), task) {
        (Some(f), _) => f,
        (None, TaskKind::Classification) => "tsv",
        (None, TaskKind::Tagging) => "conll",
    }
}

/// Reads one file; the vocabulary grows only when `grow` is set.
pub fn load_file(
    path: &Path,
    flags: &FormatFlags,
    config: &TrainConfig,
    vocab: &mut Vocab,
    labels: &mut Labels,
    grow: bool,
) -> Result<Vec<Instance>> {
    Ok(match format_of(flags, config.task) {
        "tsv" => {
            if config.task != TaskKind::Classification {
                bail!("tsv files hold classification data; use --format conll for tagging");
            }
            data::load_classification_tsv(path, vocab, labels, grow)?
                .into_iter()
                .map(Instance::from)
                .collect()
        }
        _ => {
            if config.task != TaskKind::Tagging {
                bail!("conll files hold tagging data; pass --task tagging");
            }
            let opts = ConllOptions {
                column: flags.column,
                to_bioes: !flags.keep_tags,
                normalize_digits: config.normalize_digits,
                grow,
            };
            data::load_conll(path, vocab, labels, opts)?
                .into_iter()
                .map(Instance::from)
                .collect()
        }
    })
}

fn synthetic(kind: &str, n: usize, max_len: usize, seed: u64, vocab: &mut Vocab) -> Result<Vec<Instance>> {
    Ok(match kind {
        "classification" => synth::synth_classification(n, max_len, seed)?
            .into_iter()
            .map(|(t, y)| Instance {
                tokens: vocab.encode(&t, true),
                target: Target::Class(y),
            })
            .collect(),
        _ => synth::synth_tagging(n, max_len, seed)?
            .into_iter()
            .map(|(t, tags)| Instance {
                tokens: vocab.encode(&t, true),
                target: Target::Tags(tags),
            })
            .collect(),
    })
}

pub fn prepare(args: &TrainArgs, config: &TrainConfig) -> Result<Prepared> {
    let mut vocab = Vocab::new();
    let mut labels = Labels::new();
    let mut info = BTreeMap::new();
    let (train, dev, test) = if let Some(kind) = &args.synth {
        let task = if kind == "classification" { TaskKind::Classification } else { TaskKind::Tagging };
        if task != config.task {
            bail!("--synth {kind} needs --task {}", task.name());
        }
        let max_len = args.max_len.unwrap_or(if kind == "classification" { 64 } else { 32 });
        let classes = if kind == "classification" { 2 } else { synth::MAX_DEPTH + 1 };
        for c in 0..classes {
            labels.add(&c.to_string());
        }
        info.insert("synth".into(), kind.clone());
        info.insert("synth_train".into(), args.synth_train.to_string());
        info.insert("synth_dev".into(), args.synth_dev.to_string());
        info.insert("synth_test".into(), args.synth_test.to_string());
        info.insert("max_len".into(), max_len.to_string());
        // Distinct streams per split, all derived from the run seed.
        let s = config.seed;
        (
            synthetic(kind, args.synth_train, max_len, s, &mut vocab)?,
            synthetic(kind, args.synth_dev, max_len, s.wrapping_add(1_000_003), &mut vocab)?,
            synthetic(kind, args.synth_test, max_len, s.wrapping_add(2_000_006), &mut vocab)?,
        )
    } else {
        let (Some(train_path), Some(dev_path)) = (&args.train, &args.dev) else {
            bail!("--train and --dev are required unless --synth is given");
        };
        info.insert("format".into(), format_of(&args.format, config.task).to_string());
        info.insert("column".into(), args.format.column.to_string());
        info.insert("keep_tags".into(), args.format.keep_tags.to_string());
        info.insert("train".into(), train_path.display().to_string());
        info.insert("dev".into(), dev_path.display().to_string());
        let train = load_file(train_path, &args.format, config, &mut vocab, &mut labels, true)?;
        let dev = load_file(dev_path, &args.format, config, &mut vocab, &mut labels, false)?;
        let test = match &args.test {
            Some(p) => {
                info.insert("test".into(), p.display().to_string());
                load_file(p, &args.format, config, &mut vocab, &mut labels, false)?
            }
            None => Vec::new(),
        };
        (train, dev, test)
    };
    if train.is_empty() || dev.is_empty() {
        bail!("training and development sets must be non-empty");
    }
    let embeddings = match &args.emb {
        Some(path) => {
            info.insert("emb".into(), path.display().to_string());
            Some(pretrained_table(path, &vocab, config)?)
        }
        None => None,
    };
    info.insert("metric".into(), args.format.metric.clone());
    Ok(Prepared {
        vocab,
        labels,
        train,
        dev,
        test,
        embeddings,
        info,
    })
}

/// Embedding matrix over `vocab`: pretrained rows where available (the
/// `<unk>` row is their mean), uniform in `(-0.1, 0.1)` elsewhere.
fn pretrained_table(path: &Path, vocab: &Vocab, config: &TrainConfig) -> Result<Tensor> {
    let keep = |t: &str| vocab.id_of(t).is_some();
    let (pre_vocab, pre) = data::load_embeddings(path, config.emb_dim, config.seed, Some(&keep))?;
    let mut table = data::random_embeddings(vocab, config.emb_dim, 0.1, config.seed);
    for (pid, token) in pre_vocab.tokens().iter().enumerate() {
        if pid < data::RESERVED.len() && pid != UNK {
            continue;
        }
        if let Some(id) = vocab.id_of(token) {
            table.row_mut(id).copy_from_slice(pre.row(pid));
        }
    }
    Ok(table)
}

/// `accuracy` or `f1` for this task and label set.
pub fn metric_name(requested: &str, task: TaskKind, labels: &Labels) -> &'static str {
    match requested {
        "accuracy" => "accuracy",
        "f1" => "f1",
        _ if task == TaskKind::Tagging && labels.names().iter().any(|n| split_tag(n).0 != 'O') => "f1",
        _ => "accuracy",
    }
}

/// Span scores of tag predictions against `data`.
pub fn span_scores(eval: &Evaluation, data: &[Instance], labels: &Labels) -> SpanScores {
    let names = |tags: &[usize]| -> Vec<String> {
        tags.iter()
            .map(|&t| labels.name_of(t).unwrap_or("O").to_string())
            .collect()
    };
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for (p, inst) in eval.predictions.iter().zip(data) {
        if let (Target::Tags(p), Target::Tags(g)) = (p, &inst.target) {
            pred.push(names(p));
            gold.push(names(g));
        }
    }
    span_f1(&pred, &gold)
}

pub fn score(metric: &str, eval: &Evaluation, data: &[Instance], labels: &Labels) -> f64 {
    match metric {
        "f1" => span_scores(eval, data, labels).f1,
        _ => eval.accuracy,
    }
}
