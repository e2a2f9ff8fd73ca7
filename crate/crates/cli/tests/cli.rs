use std::path::Path;
use std::process::{Command, Output};

fn trustvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustvl")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let o = trustvl(&["eval", "--data", "x.jsonl", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn malformed_epochs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = trustvl(&["train", "--out", out.to_str().unwrap(), "--epochs", "1,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failures_use_the_error_line_format() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = trustvl(&["retrieve", "--corpus", missing.to_str().unwrap(), "--text", "a storm", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[io]: "), "{err}");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sede = 3\n").unwrap();
    let o = trustvl(&["--config", cfg.to_str().unwrap(), "gradcheck", "--module", "qava", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().last().unwrap().starts_with("error[config]: "), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_the_worst_error() {
    let o = trustvl(&["gradcheck", "--module", "qava", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let last = out.lines().last().unwrap();
    let v: f64 = last.strip_prefix("max relative error: ").unwrap().parse().unwrap();
    assert!(v < 1e-4);
}

fn synth(out: &Path) {
    let o = trustvl(&["--seed", "4", "synthesize", "--kind", "all", "--n", "6", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synthesize_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let files = ["dataset.jsonl", "corpus.jsonl", "run.json"];
    synth(&a);
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(a.join(f)).unwrap()).collect();
    synth(&a);
    for (f, x) in files.iter().zip(&first) {
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, &std::fs::read(a.join(f)).unwrap(), "{f}");
    }
    let lines = std::fs::read_to_string(a.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 18);

    let out = dir.path().join("ev");
    let o = trustvl(&[
        "retrieve",
        "--corpus",
        a.join("corpus.jsonl").to_str().unwrap(),
        "--data",
        a.join("dataset.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ev = std::fs::read_to_string(out.join("evidence.jsonl")).unwrap();
    assert_eq!(ev.lines().count(), 18);
    let first: serde_json::Value = serde_json::from_str(ev.lines().next().unwrap()).unwrap();
    assert_eq!(first["direct"].as_array().unwrap().len(), 3);
}
