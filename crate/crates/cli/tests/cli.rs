//! Runs the `gpn` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn gpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("gpn runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn best_val_loss(dir: &Path) -> f64 {
    let text = std::fs::read_to_string(dir.join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["best_val_loss"].as_f64().unwrap()
}

#[test]
fn toy_training_writes_history_and_replays_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let out = gpn(&["train", "--max-iters", "60", "--seed", "4", "--out", path(&first)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let history = std::fs::read_to_string(first.join("history.csv")).unwrap();
    assert!(history.lines().count() > 1);
    for f in ["checkpoint.json", "manifest.json", "summary.json"] {
        assert!(first.join(f).exists(), "{f}");
    }

    let replay = tmp.path().join("replay");
    let manifest = first.join("manifest.json");
    let out = gpn(&["train", "--config", path(&manifest), "--out", path(&replay)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(best_val_loss(&first), best_val_loss(&replay));

    let eval = tmp.path().join("eval");
    let ckpt = first.join("checkpoint.json");
    let out = gpn(&["eval", "--checkpoint", path(&ckpt), "--seed", "4", "--out", path(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(eval.join("eval.json").exists());

    let act = tmp.path().join("act");
    let out = gpn(&["export-activations", "--checkpoint", path(&ckpt), "--range", "-2,2", "--out", path(&act)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csvs = std::fs::read_dir(&act)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 11);
}

#[test]
fn malformed_arch_is_a_usage_error_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gpn(&["train", "--arch", "16xx30", "--out", path(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--arch"), "{}", stderr(&out));
}

#[test]
fn quick_verification_passes_and_a_corrupted_closed_form_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = tmp.path().join("ok");
    let out = gpn(&["verify", "--cases", "3", "--draws", "20000", "--out", path(&ok)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(std::fs::read_to_string(ok.join("verify.csv")).unwrap().lines().count(), 9);

    let bad = tmp.path().join("bad");
    let out = gpn(&[
        "verify", "--only", "kernels", "--cases", "3", "--draws", "20000", "--fault", "lambda-sign", "--out",
        path(&bad),
    ]);
    assert_eq!(code(&out), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL kernel lambda"), "{stdout}");
    assert!(stdout.contains("PASS kernel psi"), "{stdout}");
}

#[test]
fn only_flag_restricts_the_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gpn(&["verify", "--only", "clt", "--out", path(tmp.path())]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("central limit"));
    assert!(!stdout.contains("kernel"));

    let out = gpn(&["verify", "--only", "everything", "--out", path(tmp.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_reports_bad_and_missing_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gpn(&["bench", "--dataset", "iris", "--out", path(tmp.path())]);
    assert_eq!(code(&out), 2);
    let missing = tmp.path().join("no-data");
    let out = gpn(&["bench", "--dataset", "letter", "--data-dir", path(&missing), "--out", path(tmp.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn toy_bench_writes_one_row_per_seed_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gpn(&["bench", "--seeds", "5", "--max-iters", "20", "--out", path(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().last().unwrap().contains("summary"));
    assert!(!csv.contains("NaN"));
}
