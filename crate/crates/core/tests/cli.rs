use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mc3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mc3d"))
        .args(args)
        .env("MC3D_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = mc3d(args);
    assert!(
        out.status.success(),
        "mc3d {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset, two-epoch base step, evaluation; returns the report CSV.
fn pipeline(root: &Path) -> String {
    let data = root.join("data");
    let base = root.join("base");
    let eval = root.join("eval");
    ok(&[
        "gen-data", "--extent", "16", "--subjects", "3", "--validation", "1", "--test", "1", "--seed", "3", "--out",
        s(&data),
    ]);
    ok(&["train-base", "--data", s(&data), "--epochs", "2", "--seed", "1", "--out", s(&base)]);
    ok(&[
        "eval",
        "--ckpt",
        s(&base.join("base.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    assert!(base.join("run_manifest.json").exists());
    fs::read_to_string(eval.join("report.csv")).unwrap()
}

#[test]
fn repeated_pipeline_writes_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    assert_eq!(first, pipeline(b.path()));
    assert!(first.lines().count() > 1);
    assert_eq!(
        fs::read(a.path().join("base/base.ckpt")).unwrap(),
        fs::read(b.path().join("base/base.ckpt")).unwrap()
    );
}

#[test]
fn gradcheck_succeeds() {
    ok(&["gradcheck", "--instances", "2", "--seed", "4"]);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mc3d(&[
        "eval",
        "--ckpt",
        s(&dir.path().join("absent.ckpt")),
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_is_rejected() {
    let out = mc3d(&["train-base", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}
