use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gamlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gamlab"))
        .args(args)
        .env("GAMLAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn field(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("{key} missing from {text:?}"))
        .parse()
        .unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = stderr(o).lines().last().unwrap_or_default().to_owned();
    serde_json::from_str(&line).unwrap_or_else(|_| panic!("not a JSON error line: {line:?}"))
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let o = gamlab(&["tokenizer-train", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn tokenizer_default_vocab_is_ten_thousand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("vocab.json");
    let o = gamlab(&[
        "tokenizer-train",
        "--corpus",
        data("alice29.txt").to_str().unwrap(),
        data("asyoulik.txt").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).starts_with("vocab_size=10000 corpus_bytes="),
        "{}",
        stdout(&o)
    );
    let bpe = gamlab_core::Bpe::load(&out).unwrap();
    assert_eq!(bpe.vocab_size(), 10_000);
}

#[test]
fn tokenizer_shortfall_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("a.txt");
    std::fs::write(&corpus, "aaaa").unwrap();
    let out = dir.path().join("v.json");
    let o = gamlab(&[
        "tokenizer-train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab-size",
        "258",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "vocab_size"), 257.0);
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn variant_with_transformer_exits_two() {
    let o = gamlab(&[
        "train",
        "--arch",
        "transformer",
        "--variant",
        "local_only",
        "--dry-run",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");
}

#[test]
fn unknown_config_key_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, "{\n  \"model\": {\"layers\": 2}\n}\n").unwrap();
    let o = gamlab(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "config");
    assert!(
        e["message"].as_str().unwrap().contains("run.json:2:"),
        "{e}"
    );
}

fn dry_run_manifest(extra: &[&str]) -> serde_json::Value {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--dry-run",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = gamlab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn manifest_reports_reference_parameter_counts() {
    let m = dry_run_manifest(&[]);
    assert_eq!(m["param_count"], 22_599_680);
    assert_eq!(m["config"]["train"]["batch_size"], 32);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let m = dry_run_manifest(&["--arch", "transformer"]);
    assert_eq!(m["param_count"], 24_166_400);

    let m = dry_run_manifest(&["--variant", "local_only"]);
    let n = m["param_count"].as_f64().unwrap();
    assert!((n / 1e6 - 17.87).abs() < 0.01, "{n}");
}

#[test]
fn config_hash_tracks_the_effective_configuration() {
    let a = dry_run_manifest(&["--seed", "1"]);
    let b = dry_run_manifest(&["--seed", "1"]);
    let c = dry_run_manifest(&["--seed", "2"]);
    // Each dry run writes to its own directory.
    let strip = |m: &serde_json::Value| {
        let mut c = m["config"].clone();
        c.as_object_mut().unwrap().remove("out_dir");
        c
    };
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(strip(&a), strip(&c));
    assert_eq!(c["config"]["model"]["seed"], 2);
    assert_eq!(c["config"]["train"]["seed"], 2);
}

/// A tiny run: first 40 KB of one text for training, 8 KB of another for
/// validation.
fn tiny_run(dir: &Path, out: &str) -> Output {
    let train_text = std::fs::read(data("alice29.txt")).unwrap();
    let val_text = std::fs::read(data("asyoulik.txt")).unwrap();
    std::fs::write(dir.join("train.txt"), &train_text[..40_000]).unwrap();
    std::fs::write(dir.join("val.txt"), &val_text[..8_000]).unwrap();
    let cfg = serde_json::json!({
        "model": {
            "vocab_size": 320, "block_size": 16, "d_model": 16, "n_layers": 1,
            "num_slots": 8, "n_head": 2
        },
        "train": {
            "epochs": 2, "batch_size": 8, "eval_batch_size": 8, "warmup_steps": 5,
            "lr_peak": 3e-3
        },
        "data": {
            "train": ["train.txt"], "val": ["val.txt"],
            "tokenizer": "vocab.json", "cache": "train.tok"
        },
        "out_dir": out
    });
    std::fs::write(dir.join("run.json"), cfg.to_string()).unwrap();
    gamlab(&[
        "train",
        "--config",
        dir.join("run.json").to_str().unwrap(),
        "--seed",
        "3",
    ])
}

fn loss_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
        .collect()
}

#[test]
fn train_writes_artifacts_repeats_and_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    let first = tiny_run(dir.path(), "a");
    assert!(first.status.success(), "{}", stderr(&first));
    let a = dir.path().join("a");
    for f in [
        "metrics.csv",
        "checkpoint_final.gamc",
        "checkpoint_best.gamc",
        "tokenizer.json",
        "manifest.json",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(dir.path().join("train.tok").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["vocab_size"], 320);
    assert!(manifest["result"]["final_val_loss"].is_f64());

    // Second run reuses the saved tokenizer and token cache.
    let second = tiny_run(dir.path(), "b");
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(stderr(&second).contains("token cache"));
    let csv = |d: &str| std::fs::read_to_string(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(loss_columns(&csv("a")), loss_columns(&csv("b")));
    assert_eq!(
        std::fs::read(a.join("checkpoint_final.gamc")).unwrap(),
        std::fs::read(dir.path().join("b/checkpoint_final.gamc")).unwrap()
    );

    let in_process = field(&stdout(&first), "val_loss");
    let o = gamlab(&[
        "eval",
        "--checkpoint",
        a.join("checkpoint_final.gamc").to_str().unwrap(),
        "--data",
        dir.path().join("val.txt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let (loss, ppl) = (field(&text, "val_loss"), field(&text, "val_ppl"));
    assert_eq!(ppl, loss.exp());
    assert!((loss - in_process).abs() < 1e-6, "{loss} vs {in_process}");
}

#[test]
fn eval_missing_checkpoint_exits_one() {
    let o = gamlab(&[
        "eval",
        "--checkpoint",
        "/nonexistent/c.gamc",
        "--data",
        "/nonexistent",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "io");
    assert!(e["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/c.gamc"));
}

#[test]
fn bench_writes_csv_and_plot_and_flags_skips() {
    let dir = tempfile::tempdir().unwrap();
    let o = gamlab(&[
        "bench",
        "--seq-lens",
        "32,64,128",
        "--batch",
        "1",
        "--d-model",
        "16",
        "--n-head",
        "2",
        "--warmup",
        "0",
        "--iters",
        "1",
        "--mem-limit-mb",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next(),
        Some("arch,seq_len,time_ms_mean,time_ms_median,peak_mem_mb,status")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows
        .iter()
        .any(|r| r.starts_with("gam,32,") && r.ends_with(",ok")));
    assert!(rows
        .iter()
        .any(|r| r.starts_with("transformer,128,") && r.ends_with(",skipped_oom")));
    assert!(csv.starts_with("# ") && csv.contains("threads=2"));
    assert!(std::fs::read_to_string(dir.path().join("scaling.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn default_bench_sequence_lengths() {
    assert_eq!(
        gamlab_bench::DEFAULT_SEQ_LENS,
        [256, 512, 1024, 2048, 4096, 8192]
    );
}
