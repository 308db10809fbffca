use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slstm_cli::args::FormatFlags;
use slstm_cli::commands::bench::CSV_HEADER;
use slstm_cli::dataset::{load_file, span_scores};
use slstm_core::data::{Labels, Vocab};
use slstm_core::model::{Instance, TaskKind};
use slstm_core::training::{Evaluation, TrainConfig};
use tempfile::TempDir;

fn slstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slstm")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn conll_flags() -> FormatFlags {
    FormatFlags {
        format: Some("conll".into()),
        column: 1,
        keep_tags: false,
        metric: "auto".into(),
    }
}

const GOLD: &str = "John B-PER\nSmith I-PER\nin O\nParis B-LOC\n\nhe O\nleft O\n";

fn f1_against(gold: &str, pred: &str) -> (f64, f64, f64) {
    let dir = TempDir::new().unwrap();
    let (g, p) = (dir.path().join("gold"), dir.path().join("pred"));
    fs::write(&g, gold).unwrap();
    fs::write(&p, pred).unwrap();
    let config = TrainConfig {
        task: TaskKind::Tagging,
        ..TrainConfig::default()
    };
    let mut vocab = Vocab::new();
    let mut labels = Labels::new();
    let gold: Vec<Instance> = load_file(&g, &conll_flags(), &config, &mut vocab, &mut labels, true).unwrap();
    let pred: Vec<Instance> = load_file(&p, &conll_flags(), &config, &mut vocab, &mut labels, true).unwrap();
    let eval = Evaluation {
        predictions: pred.into_iter().map(|i| i.target).collect(),
        accuracy: 0.0,
    };
    let s = span_scores(&eval, &gold, &labels);
    (s.precision, s.recall, s.f1)
}

#[test]
fn span_f1_fixtures() {
    assert_eq!(f1_against(GOLD, GOLD).2, 100.0);
    let all_o = "John O\nSmith O\nin O\nParis O\n\nhe O\nleft O\n";
    assert_eq!(f1_against(GOLD, all_o).2, 0.0);
    let one_right = "John B-PER\nSmith I-PER\nin O\nParis B-PER\n\nhe O\nleft O\n";
    assert_eq!(f1_against(GOLD, one_right), (50.0, 50.0, 50.0));
}

#[test]
fn unknown_encoder_is_a_usage_error() {
    let out = slstm(&["train", "--synth", "classification", "--encoder", "transformer"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("transformer"));
    let out = slstm(&["train", "--synth", "classification", "--head", "pool"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_controls() {
    let out = slstm(&["gradcheck", "--only", "constant-loss"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("constant.w"));

    let out = slstm(&["gradcheck", "--only", "bilstm-l1-softmax"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));

    let out = slstm(&["gradcheck", "--only", "bilstm-l1-softmax", "--corrupt-param", "out.W_c"]);
    assert_ne!(out.status.code(), Some(0));
    let report = text(&out.stdout) + &text(&out.stderr);
    assert!(report.contains("out.W_c"));
    assert!(report.lines().any(|l| l.contains("out.W_c") && l.contains("FAIL")));
}

#[test]
fn bench_csv_header() {
    let out = slstm(&[
        "bench", "--lengths", "4,8", "--workers", "1,2", "--hidden", "4", "--steps", "2", "--repeats", "1",
    ]);
    assert!(out.status.success());
    let csv = text(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(CSV_HEADER, "encoder,length,workers,steps,sec_per_token,speedup");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.len(), 6);
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
    }
    assert_eq!(rows[0][5].parse::<f64>().unwrap(), 1.0);
    let bilstm = rows.iter().find(|r| r[0] == "bilstm" && r[1] == "8").unwrap();
    assert_eq!(bilstm[3], "9");

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("b.csv");
    let out = slstm(&[
        "bench", "--encoders", "slstm", "--lengths", "4", "--workers", "1", "--hidden", "4", "--steps", "1",
        "--repeats", "1", "--out", path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(fs::read_to_string(&path).unwrap().starts_with(CSV_HEADER));
}

fn tiny_train(out: &Path, extra: &[&str]) -> Output {
    seeded_train(out, "5", extra)
}

fn seeded_train(out: &Path, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--synth", "classification", "--synth-train", "60", "--synth-dev", "20", "--max-len", "10",
        "--hidden", "6", "--emb-dim", "6", "--steps", "2", "--epochs", "2", "--seed", seed, "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    slstm(&args)
}

fn manifest_without_timing(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn seeded_runs_reproduce() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(tiny_train(&a, &[]).status.success());
    assert!(tiny_train(&b, &["--json"]).status.success());
    assert_eq!(manifest_without_timing(&a), manifest_without_timing(&b));
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());

    let m = manifest_without_timing(&a);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["hidden"], "6");
    assert_eq!(m["epochs"].as_array().unwrap().len(), 2);
    let timing: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(timing["timing"]["epoch_seconds"].as_array().unwrap().len(), 2);

    let c = dir.path().join("c");
    assert!(seeded_train(&c, "6", &[]).status.success());
    assert_ne!(manifest_without_timing(&a), manifest_without_timing(&c));
}

#[test]
fn json_lines_per_epoch() {
    let dir = TempDir::new().unwrap();
    let out = tiny_train(&dir.path().join("r"), &["--json"]);
    let lines: Vec<serde_json::Value> = text(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let epochs: Vec<_> = lines.iter().filter(|l| l["event"] == "epoch").collect();
    assert_eq!(epochs.len(), 2);
    for e in epochs {
        assert!(e["loss"].as_f64().unwrap() > 0.0);
        assert!(e["dev"].as_f64().is_some() && e["seconds"].as_f64().is_some());
    }
}

#[test]
fn checkpoint_mismatch_is_a_version_error() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("r");
    assert!(tiny_train(&run, &[]).status.success());
    let ckpt = run.join("best.ckpt");
    let data = dir.path().join("dev.tsv");
    fs::write(&data, "1\tw1 w2 A w3\n0\tw4 w5\n").unwrap();
    let (c, d) = (ckpt.to_str().unwrap(), data.to_str().unwrap());

    let ok = slstm(&["eval", "--checkpoint", c, "--data", d, "--json"]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    let line: serde_json::Value = serde_json::from_str(text(&ok.stdout).trim()).unwrap();
    assert_eq!(line["examples"], 2);
    let again = slstm(&["eval", "--checkpoint", c, "--data", d, "--json"]);
    assert_eq!(ok.stdout, again.stdout);

    let out = slstm(&["eval", "--checkpoint", c, "--data", d, "--hidden", "7"]);
    assert_eq!(out.status.code(), Some(slstm_cli::EXIT_VERSION), "{}", text(&out.stderr));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[9] = 99;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let out = slstm(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", d]);
    assert_eq!(out.status.code(), Some(slstm_cli::EXIT_VERSION));
}

#[test]
fn parse_errors_name_file_and_line() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.tsv");
    fs::write(&train, "1\tgood line\nmissing tab\n").unwrap();
    let out = slstm(&[
        "train", "--train", train.to_str().unwrap(), "--dev", train.to_str().unwrap(), "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("train.tsv") && err.contains(":2"), "{err}");
}

#[test]
fn tagging_eval_reports_spans() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.conll");
    let mut body = String::new();
    for _ in 0..20 {
        body.push_str(GOLD);
        body.push('\n');
    }
    fs::write(&train, &body).unwrap();
    let run = dir.path().join("r");
    let t = train.to_str().unwrap();
    let out = slstm(&[
        "train", "--task", "tagging", "--head", "crf", "--format", "conll", "--column", "1", "--train", t, "--dev",
        t, "--hidden", "8", "--emb-dim", "8", "--steps", "2", "--epochs", "3", "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let ckpt = run.join("best.ckpt");
    let out = slstm(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", t, "--format", "conll", "--column", "1", "--json",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let line: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert_eq!(line["gold"], 40);
    let f1 = line["f1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&f1));
}

#[test]
fn config_file_then_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nhidden = 5\nemb_dim=5\nsteps=1\nepochs=1\nlr=0.01\n").unwrap();
    let run = dir.path().join("r");
    let out = slstm(&[
        "train", "--config", cfg.to_str().unwrap(), "--lr", "0.02", "--synth", "classification", "--synth-train",
        "20", "--synth-dev", "10", "--max-len", "8", "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let m = manifest_without_timing(&run);
    assert_eq!(m["config"]["hidden"], "5");
    assert_eq!(m["config"]["lr"], "0.02");
}
