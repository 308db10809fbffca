//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use slstm_core::training::TrainConfig;

use crate::manifest::BUILD_ID;

#[derive(Debug, Parser)]
#[command(name = "slstm", version = BUILD_ID, about = "Sentence-state LSTM encoders, baselines and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare taped gradients with finite differences for every model variant.
    Gradcheck(GradcheckArgs),
    /// Time forward passes over lengths and worker counts.
    Bench(BenchArgs),
}

/// Model and optimiser settings. A config file is applied first, then flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["slstm", "bilstm"])]
    pub encoder: Option<String>,
    #[arg(long, value_parser = ["softmax", "attn", "crf"])]
    pub head: Option<String>,
    #[arg(long, value_parser = ["classification", "tagging"])]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
    /// Any other configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigFlags {
    pub fn apply(&self, config: &mut TrainConfig) -> anyhow::Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            config.apply_kv(&text)?;
        }
        let flags: [(&str, Option<String>); 18] = [
            ("encoder", self.encoder.clone()),
            ("head", self.head.clone()),
            ("task", self.task.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("window", self.window.map(|v| v.to_string())),
            ("nodes", self.nodes.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lr_decay", self.lr_decay.map(|v| v.to_string())),
            ("clip_norm", self.clip.map(|v| v.to_string())),
            ("batch_size", self.batch.map(|v| v.to_string())),
            ("l2", self.l2.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("emb_dim", self.emb_dim.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                config.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            config.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::default();
        self.apply(&mut c)?;
        c.validate()?;
        Ok(c)
    }
}

/// How dataset files are read.
#[derive(Debug, Clone, Args)]
pub struct FormatFlags {
    /// `tsv` (label, tab, text) or `conll`; defaults by task.
    #[arg(long, value_parser = ["tsv", "conll"])]
    pub format: Option<String>,
    /// Zero-based CoNLL column holding the tag.
    #[arg(long, default_value_t = 3)]
    pub column: usize,
    /// Keep CoNLL tags as they are instead of converting BIO to BIOES.
    #[arg(long)]
    pub keep_tags: bool,
    /// `accuracy`, `f1` (BIOES spans) or `auto`: F1 when tags carry span prefixes.
    #[arg(long, default_value = "auto", value_parser = ["auto", "accuracy", "f1"])]
    pub metric: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigFlags,
    #[command(flatten)]
    pub format: FormatFlags,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained embeddings in word-vector text format.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Generate a synthetic task instead of reading files.
    #[arg(long, value_parser = ["classification", "tagging"], conflicts_with_all = ["train", "dev", "test"])]
    pub synth: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub synth_train: usize,
    #[arg(long, default_value_t = 1_000)]
    pub synth_dev: usize,
    #[arg(long, default_value_t = 0)]
    pub synth_test: usize,
    /// Maximum synthetic sequence length (64 for classification, 32 for tagging).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output directory for the checkpoint and manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Machine-readable JSON lines instead of the human table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides checked against the checkpoint; a disagreement in model
    /// shape is a version error.
    #[command(flatten)]
    pub config: ConfigFlags,
    #[command(flatten)]
    pub format: FormatFlags,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    #[arg(long, default_value_t = 5)]
    pub length: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Parameters are redrawn uniformly from ±scale before checking.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Scale the analytic gradient of this parameter (negative control).
    #[arg(long)]
    pub corrupt_param: Option<String>,
    #[arg(long, default_value_t = 1.5)]
    pub corrupt_factor: f64,
    /// Use the fourth-order five-point stencil instead of central differences.
    #[arg(long)]
    pub five_point: bool,
    /// Run only variants whose name contains this string.
    #[arg(long)]
    pub only: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "slstm,bilstm")]
    pub encoders: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub nodes: usize,
    /// Sentences per timed forward pass.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}
