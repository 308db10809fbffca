use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use slstm_core::autodiff::ParamStore;
use slstm_core::data::{Labels, Vocab};
use slstm_core::model::Model;
use slstm_core::training::{evaluate, Checkpoint};
use slstm_core::Error;

use crate::args::EvalArgs;
use crate::dataset::{load_file, metric_name, span_scores};

pub fn run(args: &EvalArgs) -> Result<i32> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut config = ck.config.clone();
    args.config.apply(&mut config)?;
    config.validate()?;

    let mut vocab = Vocab::from_tokens(ck.vocab.clone())?;
    if vocab.hash() != ck.vocab_hash {
        return Err(Error::Version("vocabulary does not match its recorded hash".into()).into());
    }
    let mut labels = Labels::from_names(ck.labels.clone());
    let data = load_file(&args.data, &args.format, &config, &mut vocab, &mut labels, false)?;
    if labels.len() != ck.labels.len() {
        let unseen = &labels.names()[ck.labels.len()..];
        anyhow::bail!("labels not seen in training: {}", unseen.join(", "));
    }

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::register(config.model_config(vocab.len(), labels.len()), &mut store, &mut rng, None)
        .map_err(|e| Error::Version(format!("checkpoint/config mismatch: {e}")))?;
    ck.restore(&mut store)?;

    let eval = evaluate(&model, &store, &data, &config)?;
    match metric_name(&args.format.metric, config.task, &labels) {
        "f1" => {
            let s = span_scores(&eval, &data, &labels);
            if args.json {
                let line = json!({
                    "event": "eval", "precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "predicted": s.predicted, "gold": s.gold, "correct": s.correct, "accuracy": eval.accuracy,
                });
                println!("{line}");
            } else {
                println!("{:>10}  {:>10}  {:>10}  {:>10}", "precision", "recall", "f1", "accuracy");
                println!("{:>10.2}  {:>10.2}  {:>10.2}  {:>10.2}", s.precision, s.recall, s.f1, eval.accuracy);
            }
        }
        _ => {
            if args.json {
                println!("{}", json!({"event": "eval", "accuracy": eval.accuracy, "examples": data.len()}));
            } else {
                println!("accuracy {:.2} over {} examples", eval.accuracy, data.len());
            }
        }
    }
    Ok(0)
}
