use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic set: five images per class.
fn small_synth(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = gcf(&["synth", "--out", s(&data), "--n-per-class", "5", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    data.join("manifest.csv")
}

#[test]
fn train_records_variant_and_eval_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    let run = dir.path().join("run");
    let out = gcf(&[
        "train", "--manifest", s(&manifest), "--out", s(&run), "--variant", "v2",
        "--set", "train.epochs=1", "--set", "train.batch_size=8",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["split"], "train");
    assert_eq!(records[1]["split"], "test");
    assert!(records.iter().all(|r| r["variant"] == "V2"), "{metrics}");

    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("variant = v2"), "{config}");

    let out = gcf(&[
        "eval", "--manifest", s(&manifest), "--checkpoint", s(&run.join("checkpoint.gcf")),
        "--split", s(&run.join("split.json")), "--variant", "v2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(run.join("eval_report.json")).unwrap(),
        fs::read(run.join("report.json")).unwrap()
    );
}

#[test]
fn checkpoint_of_other_variant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path());
    let run = dir.path().join("run");
    let out = gcf(&[
        "train", "--manifest", s(&manifest), "--out", s(&run), "--variant", "v1",
        "--set", "train.epochs=1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = gcf(&[
        "eval", "--manifest", s(&manifest), "--checkpoint", s(&run.join("checkpoint.gcf")),
        "--variant", "v3",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).starts_with("error[E5]"), "{}", stderr(&out));
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = gcf(&["train", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = gcf(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));

    let out = gcf(&["train", "--set", "train.learning_rate=-1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = gcf(&["gradcheck", "--inject-fault", "matmul"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL")), "{stdout}");
}

#[test]
fn gradcheck_passes_for_every_variant() {
    for v in ["v1", "v2", "v3"] {
        let out = gcf(&["gradcheck", "--variant", v, "--seed", "5"]);
        assert!(out.status.success(), "{v}: {}", String::from_utf8_lossy(&out.stdout));
    }
}
