use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bayesfit::linalg::Matrix;
use bayesfit_cli::{split_indices, train_test_split};
use proptest::prelude::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bayesfit"));
    c.env_remove("BAYESFIT_OUTPUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn line_csv(dir: &Path, n: usize) -> PathBuf {
    let mut text = String::from("x,y\n");
    for i in 0..n {
        let x = i as f64 / n as f64 * 4.0 - 2.0;
        // Deterministic pseudo-noise in [-0.1, 0.1].
        let e = ((i * 7919) % 201) as f64 / 1000.0 - 0.1;
        text += &format!("{x},{}\n", 2.0 * x + 1.0 + e);
    }
    let p = dir.join("line.csv");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gp_advi_fit_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 12);
    let out = dir.path().join("run1");
    let o = run(&[
        "fit", "--model", "gp", "--engine", "advi", "--data", s(&data), "--target", "y", "--out", s(&out),
        "--steps", "500",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.bml", "elbo.csv", "summary.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["lengthscale", "signal", "noise"]);
    assert!(o.stdout.is_empty());
}

#[test]
fn nuts_fit_exports_traces() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 20);
    let out = dir.path().join("run");
    let o = run(&[
        "fit", "--engine", "nuts", "--data", s(&data), "--target", "y", "--out", s(&out), "--chains", "2",
        "--draws", "100", "--warmup", "100",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("trace_manifest.json").exists());
    assert!(!out.join("elbo.csv").exists());
    let traces = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("trace_") )
        .count();
    // w[0], b, sigma plus the manifest.
    assert_eq!(traces, 4);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 10);
    let out = dir.path().join("env-out");
    let o = bin()
        .args(["fit", "--data", s(&data), "--target", "y", "--steps", "200"])
        .env("BAYESFIT_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("model.bml").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fit", "--data", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--target"));

    assert_eq!(run(&["fit", "--nonsense"]).status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,2\n2,oops\n3,4\n").unwrap();
    let o = run(&["fit", "--data", s(&bad), "--target", "y", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 2, column y"), "{}", stderr(&o));

    let data = line_csv(dir.path(), 10);
    let o = run(&["fit", "--data", s(&data), "--target", "y", "--test-fraction", "1.5"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["score", "--model-file", s(&dir.path().join("none.bml")), "--data", s(&data), "--target", "y"]);
    assert_eq!(o.status.code(), Some(4));

    let corrupt = dir.path().join("corrupt.bml");
    fs::write(&corrupt, "{\"format\": \"bayesfit-model\", \"version\": 999}").unwrap();
    let o = run(&["predict", "--model-file", s(&corrupt), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("999"), "{}", stderr(&o));
}

#[test]
fn divergent_fit_is_an_inference_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 10);
    let o = run(&[
        "fit", "--data", s(&data), "--target", "y", "--out", s(dir.path()), "--learning-rate", "1e300",
        "--steps", "500",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn split_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 20);
    let out = dir.path().join("split");
    let o = run(&["split", "--data", s(&data), "--test-fraction", "0.25", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!((lines("train.csv"), lines("test.csv")), (16, 6));

    let run_dir = dir.path().join("fit");
    let o = run(&["fit", "--data", s(&out.join("train.csv")), "--target", "y", "--out", s(&run_dir), "--steps", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["predict", "--model-file", s(&run_dir.join("model.bml")), "--data", s(&out.join("test.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "mean,sd");
    assert_eq!(rows.len(), 6);
    let test = fs::read_to_string(out.join("test.csv")).unwrap();
    for (pred, truth) in rows[1..].iter().zip(test.lines().skip(1)) {
        let m: f64 = pred.split(',').next().unwrap().parse().unwrap();
        let y: f64 = truth.split(',').nth(1).unwrap().parse().unwrap();
        assert!((m - y).abs() < 0.3, "{m} vs {y}");
    }
}

#[test]
fn diagnose_rewrites_the_fit_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 15);
    let a = dir.path().join("a");
    let o = run(&["fit", "--data", s(&data), "--target", "y", "--out", s(&a), "--steps", "300", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = dir.path().join("b");
    let o = run(&["diagnose", "--model-file", s(&a.join("model.bml")), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["summary.csv", "elbo.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(o.stdout, fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn fits_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = line_csv(dir.path(), 15);
    let outs: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("r{k}"))).collect();
    for out in &outs {
        let o = run(&["fit", "--data", s(&data), "--target", "y", "--out", s(out), "--steps", "300", "--seed", "9"]);
        assert!(o.status.success());
    }
    for f in ["model.bml", "elbo.csv", "summary.csv"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

proptest! {
    #[test]
    fn splits_partition_the_rows(n in 2usize..200, fraction in 0.0f64..0.99, seed in any::<u64>()) {
        match split_indices(n, fraction, seed) {
            Ok((train, test)) => {
                prop_assert_eq!(test.len(), (n as f64 * fraction).round() as usize);
                let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(n - ((n as f64 * fraction).round() as usize) < 2),
        }
    }

    #[test]
    fn split_keeps_rows_paired(n in 4usize..50, seed in any::<u64>()) {
        let x = Matrix::from_fn(n, 2, |i, j| (i * 10 + j) as f64);
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let sp = train_test_split(&x, &y, 0.3, seed).unwrap();
        for (i, &t) in sp.y_test.iter().enumerate() {
            prop_assert_eq!(sp.x_test[(i, 0)], t * 10.0);
        }
        for (i, &t) in sp.y_train.iter().enumerate() {
            prop_assert_eq!(sp.x_train[(i, 1)], t * 10.0 + 1.0);
        }
    }
}
