use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tda"))
        .current_dir(root())
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, mechanism: &str) -> PathBuf {
    let path = dir.join(format!("{mechanism}.json"));
    let cfg = serde_json::json!({
        "model": {"d_model": 32, "n_layers": 2, "n_heads": 2, "context_len": 64, "mechanism": mechanism},
        "train": {"total_steps": 4, "warmup_steps": 1, "batch_tokens": 128, "seq_len": 64,
                  "eval_interval": 2, "eval_batches": 1}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn train_tiny(dir: &Path, mechanism: &str) -> PathBuf {
    let cfg = tiny_config(dir, mechanism);
    let out = dir.join(format!("train_{mechanism}"));
    let o = tda(&["train", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("model.ckpt")
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = tda(&["train", "--corpus", "no/such/corpus.txt", "--output", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no/such/corpus.txt"), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"n_layer": 3}}"#).unwrap();
    let o = tda(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_layer"), "{}", stderr(&o));
}

#[test]
fn train_writes_outputs_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "tda");
    let out = ckpt.parent().unwrap();
    for f in ["loss.csv", "model.ckpt", "summary.json", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["model"]["d_model"], 32);
    assert_eq!(snap["train"]["total_steps"], 4);
}

#[test]
fn desk_smoke_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let start = Instant::now();
    let o = tda(&["train", "--mechanism", "tda", "--steps", "10", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 300);
}

fn sparsity_column(summary_csv: &str) -> Vec<f64> {
    summary_csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn diagnose_probe_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "tda");
    let out = dir.path().join("diag");
    let o = tda(&["diagnose", "--checkpoint", ckpt.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in 0..2 {
        for h in 0..2 {
            let m = std::fs::read_to_string(out.join(format!("delta_a/layer{l}_head{h}.csv"))).unwrap();
            assert_eq!(m.lines().count(), 43);
        }
    }
    assert_eq!(std::fs::read_dir(out.join("delta_a")).unwrap().count(), 4);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(sparsity_column(&summary).iter().all(|s| (0.0..=1.0).contains(s)));
    let long = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(long.starts_with("layer,head,metric,index,value\n"));
}

#[test]
fn softmax_checkpoint_has_no_exact_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "softmax");
    let out = dir.path().join("diag");
    let o = tda(&["diagnose", "--checkpoint", ckpt.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(sparsity_column(&summary).iter().all(|&s| s == 0.0));
}

#[test]
fn diagnose_rejects_overlong_text() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "tra");
    let text = "x".repeat(65);
    let o = tda(&["diagnose", "--checkpoint", ckpt.to_str().unwrap(), "--text", &text, "--output",
        dir.path().join("d").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("exceeds context length"), "{}", stderr(&o));
}

#[test]
fn passkey_stubs() {
    let dir = tempfile::tempdir().unwrap();
    for (stub, expected) in [("echo", "1"), ("constant", "0")] {
        let out = dir.path().join(stub);
        let o = tda(&["passkey", "--stub", stub, "--lengths", "256,512", "--trials", "5", "--output",
            out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = std::fs::read_to_string(out.join("passkey.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("length,trials,correct,accuracy"));
        for line in csv.lines().skip(1) {
            assert_eq!(line.rsplit(',').next(), Some(expected), "{line}");
        }
    }
}

#[test]
fn passkey_on_checkpoint_extends_context() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "tda");
    let out = dir.path().join("pk");
    let o = tda(&["passkey", "--checkpoint", ckpt.to_str().unwrap(), "--lengths", "256", "--trials", "2",
        "--jsonl", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let jsonl = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
}

#[test]
fn bench_memory_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = tda(&["bench", "--lengths", "128,256,512", "--repetitions", "1", "--warmup", "0", "--output",
        out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mem = std::fs::read_to_string(out.join("bench_memory.csv")).unwrap();
    assert!(mem.starts_with("T,streaming_peak_elems,streaming_largest_request,dense_weight_elems\n"));
    assert_eq!(std::fs::read_to_string(out.join("bench_timing.csv")).unwrap().lines().count(), 4);
}
