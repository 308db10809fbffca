use std::fs;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use slstm_core::autodiff::ParamStore;
use slstm_core::model::Model;
use slstm_core::training::{evaluate, train_epoch, Checkpoint, TrainState};

use crate::args::TrainArgs;
use crate::dataset::{metric_name, prepare, score};
use crate::manifest::{EpochRow, RunManifest};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn run(args: &TrainArgs) -> Result<i32> {
    let config = args.config.resolve()?;
    let data = prepare(args, &config)?;
    let metric = metric_name(&args.format.metric, config.task, &data.labels);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);

    let mut manifest = RunManifest::new("train", &config);
    manifest.data = data.info.clone();
    manifest.metric = Some(metric.to_string());

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model_config = config.model_config(data.vocab.len(), data.labels.len());
    let model = Model::register(model_config, &mut store, &mut rng, data.embeddings.as_ref())?;
    let mut state = TrainState::new(&store);

    if !args.json {
        println!(
            "{} {} | {} train / {} dev | {} parameters",
            config.encoder.name(),
            config.head.name(),
            data.train.len(),
            data.dev.len(),
            store.num_scalars()
        );
        println!("{:>5}  {:>10}  {:>10}  {:>8}", "epoch", "loss", metric, "seconds");
    }
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..config.epochs {
        let m = train_epoch(&model, &mut store, &data.train, &config, &mut state)?;
        let eval = evaluate(&model, &store, &data.dev, &config)?;
        let dev = score(metric, &eval, &data.dev, &data.labels);
        let epoch = m.epoch + 1;
        if best.map_or(true, |(b, _)| dev > b) {
            best = Some((dev, epoch));
            let adam = state.adam.as_ref().expect("optimiser state after an epoch");
            Checkpoint::capture(&config, epoch as u64, &data.vocab, data.labels.names(), &store, adam)
                .save(&ckpt_path)?;
        }
        if args.json {
            let line = json!({
                "event": "epoch", "epoch": epoch, "loss": m.loss, "metric": metric,
                "dev": dev, "seconds": m.seconds, "skipped_batches": m.skipped_batches,
            });
            println!("{line}");
        } else {
            println!("{epoch:>5}  {:>10.5}  {dev:>10.2}  {:>8.1}", m.loss, m.seconds);
        }
        manifest.epochs.push(EpochRow {
            epoch,
            loss: m.loss,
            dev_metric: dev,
            skipped_batches: m.skipped_batches,
        });
        manifest.timing.epoch_seconds.push(m.seconds);
    }
    let (best_dev, best_epoch) = best.expect("at least one epoch");
    manifest.results.insert("best_dev".into(), best_dev);
    manifest.results.insert("best_epoch".into(), best_epoch as f64);

    if !data.test.is_empty() {
        let ck = Checkpoint::load(&ckpt_path)?;
        ck.restore(&mut store)?;
        let eval = evaluate(&model, &store, &data.test, &config)?;
        let test = score(metric, &eval, &data.test, &data.labels);
        manifest.results.insert("test".into(), test);
        if args.json {
            println!("{}", json!({"event": "test", "metric": metric, "value": test, "best_epoch": best_epoch}));
        } else {
            println!("test {metric} {test:.2} (best dev epoch {best_epoch})");
        }
    }
    if args.json {
        println!("{}", json!({"event": "best", "metric": metric, "dev": best_dev, "epoch": best_epoch}));
    } else {
        println!("best dev {metric} {best_dev:.2} at epoch {best_epoch}; checkpoint {}", ckpt_path.display());
    }
    manifest.finish();
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    Ok(0)
}
