//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bayesfit::advi::{fit_advi, AdviConfig};
use bayesfit::diagnostics::{ess, split_rhat, summarize_trace};
use bayesfit::distributions::Distribution;
use bayesfit::linalg::Matrix;
use bayesfit::model::{IidNormalLikelihood, ModelGraph};
use bayesfit::models::{
    gp_model_graph, linear_model_graph, Engine, GPRegressorSpec, GaussianProcessRegressor,
    LinearRegressionSpec, NoisePrior,
};
use bayesfit::nuts::{self, NutsConfig};
use bayesfit::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

// Criterion 1: reverse-mode gradients against central differences.

fn sixteen_points() -> (Matrix, Vec<f64>) {
    let mut r = rng::stream(1, "acceptance-data", 0);
    let x = Matrix::from_fn(16, 2, |_, _| normal(&mut r));
    let y = (0..16)
        .map(|i| 1.5 * x[(i, 0)] - 0.7 * x[(i, 1)] + 0.3 + 0.2 * normal(&mut r))
        .collect();
    (x, y)
}

fn max_fd_error(m: &ModelGraph, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "acceptance-points", 0);
    let batch = m.full_batch();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let z: Vec<f64> = (0..m.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, g) = m.value_and_grad(&z, &batch).unwrap();
        for i in 0..m.dim() {
            let h = 1e-5;
            let (mut hi, mut lo) = (z.clone(), z.clone());
            hi[i] += h;
            lo[i] -= h;
            let fd = (m.log_joint_value(&hi).unwrap() - m.log_joint_value(&lo).unwrap()) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1.0));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let (x, y) = sixteen_points();
    let lin = linear_model_graph(&x, &y, &LinearRegressionSpec::default()).map_err(|e| e.to_string())?;
    let gp = gp_model_graph(&x, &y, &GPRegressorSpec::default()).map_err(|e| e.to_string())?;
    let (a, b) = (max_fd_error(&lin, 1), max_fd_error(&gp, 2));
    check(
        a < 1e-5 && b < 1e-5,
        format!("max relative error linear {a:.2e}, gp {b:.2e} (< 1e-5)"),
    )
}

// Criteria 2 and 6: the conjugate Normal-Normal model under ADVI.

const PRIOR_SD: f64 = 2.0;
const NOISE_SD: f64 = 1.0;

fn conjugate_data() -> Vec<f64> {
    let mut r = rng::stream(2024, "acceptance-data", 0);
    (0..20).map(|_| 1.3 + NOISE_SD * normal(&mut r)).collect()
}

/// log N(y; 0, σ²I + s0²11ᵀ) via the matrix determinant lemma and Sherman-Morrison.
fn log_evidence(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let (s2, t2) = (NOISE_SD * NOISE_SD, PRIOR_SD * PRIOR_SD);
    let sum: f64 = y.iter().sum();
    let sum_sq: f64 = y.iter().map(|v| v * v).sum();
    let log_det = n * s2.ln() + (1.0 + n * t2 / s2).ln();
    let quad = (sum_sq - t2 * sum * sum / (s2 + n * t2)) / s2;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

fn conjugate_fit() -> Result<(Vec<f64>, bayesfit::advi::AdviFit), String> {
    let y = conjugate_data();
    let m = ModelGraph::builder()
        .scalar("mu", Distribution::normal(0.0, PRIOR_SD).unwrap())
        .likelihood(IidNormalLikelihood::new(y.clone(), NOISE_SD, "mu").unwrap())
        .build()
        .map_err(|e| e.to_string())?;
    let config = AdviConfig {
        n_mc: 10,
        ..AdviConfig::default()
    };
    let fit = fit_advi(&m, &config).map_err(|e| e.to_string())?;
    Ok((y, fit))
}

fn criterion_2(fit: &(Vec<f64>, bayesfit::advi::AdviFit)) -> Outcome {
    let (y, fit) = fit;
    let precision = 1.0 / (PRIOR_SD * PRIOR_SD) + y.len() as f64 / (NOISE_SD * NOISE_SD);
    let mean = y.iter().sum::<f64>() / (NOISE_SD * NOISE_SD) / precision;
    let sd = precision.sqrt().recip();
    let (qm, qs) = (fit.posterior.mu[0], fit.posterior.sd()[0]);
    check(
        (qm - mean).abs() < 0.05 && (qs / sd - 1.0).abs() < 0.10,
        format!("mean {qm:.4} vs {mean:.4} (±0.05), sd {qs:.4} vs {sd:.4} (±10%)"),
    )
}

fn criterion_6(fit: &(Vec<f64>, bayesfit::advi::AdviFit)) -> Outcome {
    let (y, fit) = fit;
    let h = &fit.history;
    if h.len() < 100 {
        return Err(format!("only {} steps recorded", h.len()));
    }
    let (at_100, last) = (h.smoothed_at(99), h.smoothed_at(h.len() - 1));
    let evidence = log_evidence(y);
    check(
        last > at_100 && (last - evidence).abs() < 0.1,
        format!(
            "smoothed ELBO {last:.4} at step {} > {at_100:.4} at step 100; log evidence {evidence:.4} (±0.1)",
            h.len()
        ),
    )
}

// Criterion 3: fixed-noise linear regression under NUTS against the exact posterior.

fn criterion_3() -> Outcome {
    let sigma = 0.5;
    let mut r = rng::stream(3, "acceptance-data", 0);
    let x = Matrix::from_fn(50, 2, |_, _| normal(&mut r));
    let y: Vec<f64> = (0..50)
        .map(|i| 0.8 * x[(i, 0)] - 1.2 * x[(i, 1)] + 0.5 + sigma * normal(&mut r))
        .collect();
    let spec = LinearRegressionSpec {
        noise: NoisePrior::Fixed { sigma },
        ..LinearRegressionSpec::default()
    };
    let m = linear_model_graph(&x, &y, &spec).map_err(|e| e.to_string())?;
    let trace = nuts::sample(&m, &NutsConfig::default()).map_err(|e| e.to_string())?;

    // Exact posterior of (w0, w1, b) with independent N(0, 10) priors.
    let design = DMatrix::from_fn(50, 3, |i, j| if j < 2 { x[(i, j)] } else { 1.0 });
    let precision = design.transpose() * &design / (sigma * sigma) + DMatrix::identity(3, 3) / 100.0;
    let cov = precision.try_inverse().ok_or("singular posterior precision")?;
    let exact = &cov * design.transpose() * DVector::from_column_slice(&y) / (sigma * sigma);

    let s = summarize_trace(&trace).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, row) in s.rows.iter().enumerate() {
        let (mcse, rhat, e) = (row.mcse.unwrap_or(f64::NAN), row.rhat.unwrap_or(f64::NAN), row.ess.unwrap_or(0.0));
        let z = (row.mean - exact[k]).abs() / mcse;
        ok &= z < 3.0 && rhat < 1.01 && e > 400.0;
        parts.push(format!("{} |err|/mcse {z:.2} R-hat {rhat:.4} ESS {e:.0}", row.name));
    }
    check(ok, parts.join("; "))
}

// Criterion 4: 10-D standard normal.

fn criterion_4() -> Outcome {
    let m = ModelGraph::builder()
        .vector("x", 10, Distribution::normal(0.0, 1.0).unwrap())
        .build()
        .map_err(|e| e.to_string())?;
    let trace = nuts::sample(&m, &NutsConfig { seed: 4, ..NutsConfig::default() }).map_err(|e| e.to_string())?;
    let draws = trace.pooled_draws();
    let n = draws.len() as f64;
    let mut worst_mean: f64 = 0.0;
    let mut var_range = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..10 {
        let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n;
        let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst_mean = worst_mean.max(mean.abs());
        var_range = (var_range.0.min(var), var_range.1.max(var));
    }
    let div = trace.divergences();
    check(
        worst_mean < 0.05 && var_range.0 >= 0.9 && var_range.1 <= 1.1 && div == 0,
        format!(
            "max |mean| {worst_mean:.4}, variance in [{:.3}, {:.3}], {div} divergences",
            var_range.0, var_range.1
        ),
    )
}

// Criterion 5: GP interpolation of noiseless sine points.

fn criterion_5() -> Outcome {
    let xs = [0.5, 1.5, 2.5, 3.5, 4.5];
    let x = Matrix::from_fn(5, 1, |i, _| xs[i]);
    let y: Vec<f64> = xs.iter().map(|v: &f64| v.sin()).collect();
    let spec = GPRegressorSpec {
        noise: NoisePrior::Fixed { sigma: 1e-6 },
        ..GPRegressorSpec::default()
    };
    let mut gp = GaussianProcessRegressor::new(spec);
    gp.fit(&x, &y, &Engine::Advi(AdviConfig::default())).map_err(|e| e.to_string())?;
    let (mean, sd) = gp.predict_with_std(&x).map_err(|e| e.to_string())?;
    let rel = mean
        .iter()
        .zip(&y)
        .map(|(m, t)| ((m - t) / t).abs())
        .fold(0.0, f64::max);
    let max_sd = sd.iter().copied().fold(0.0, f64::max);
    check(
        rel < 1e-3 && max_sd < 1e-2,
        format!("max relative error {rel:.2e} (< 1e-3), max sd {max_sd:.2e} (< 1e-2)"),
    )
}

// Criterion 7: the split, fit, score, predict, save, load, score transcript.

fn bayesfit(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_bayesfit"))
        .args(args)
        .env_remove("BAYESFIT_OUTPUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`bayesfit {}` exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn synthetic_csv(dir: &Path) -> PathBuf {
    let mut r = rng::stream(7, "acceptance-data", 0);
    let mut text = String::from("x,y\n");
    for _ in 0..100 {
        let x: f64 = r.random_range(-3.0..3.0);
        text += &format!("{x},{}\n", 2.0 * x + 1.0 + 0.5 * normal(&mut r));
    }
    fs::create_dir_all(dir).unwrap();
    let p = dir.join("data.csv");
    fs::write(&p, text).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_7(dir: &Path) -> Outcome {
    let data = synthetic_csv(dir);
    let split_dir = dir.join("split");
    bayesfit(&["split", "--data", p(&data), "--test-fraction", "0.3", "--seed", "7", "--out", p(&split_dir)])?;
    let run = dir.join("run");
    // Fits on the same seeded split, scores the in-memory model, then saves it.
    let before = bayesfit(&[
        "fit", "--data", p(&data), "--target", "y", "--test-fraction", "0.3", "--seed", "7", "--out", p(&run),
    ])?;
    for f in ["train.csv", "test.csv"] {
        if fs::read(split_dir.join(f)).ok() != fs::read(run.join(f)).ok() {
            return Err(format!("split and fit disagree on {f}"));
        }
    }
    let model = run.join("model.bml");
    let test = split_dir.join("test.csv");
    let preds = bayesfit(&["predict", "--model-file", p(&model), "--data", p(&test)])?;
    let after = bayesfit(&["score", "--model-file", p(&model), "--data", p(&test), "--target", "y"])?;
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("bad score {s:?}: {e}"));
    let (b, a) = (parse(&before)?, parse(&after)?);
    let rows = preds.lines().count() - 1;
    check(
        a.to_bits() == b.to_bits() && a > 0.9 && rows == 30,
        format!("score before save {b}, after load {a} (bit-identical, > 0.9); {rows} predictions"),
    )
}

// Criterion 8: diagnostics oracles.

fn criterion_8() -> Outcome {
    let chains = vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]];
    // Hand evaluation over the four half-chains [1,2], [3,4], [1,2], [3,4].
    let n = 2.0;
    let w = 0.5;
    let means = [1.5, 3.5, 1.5, 3.5];
    let grand = means.iter().sum::<f64>() / 4.0;
    let b = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / 3.0;
    let hand = (((n - 1.0) / n * w + b / n) / w).sqrt();
    let closed = (19.0f64 / 6.0).sqrt();
    if (hand - closed).abs() > 1e-12 {
        return Err(format!("hand evaluation {hand} disagrees with sqrt(19/6) {closed}"));
    }
    let r = split_rhat(&chains).map_err(|e| e.to_string())?.ok_or("R-hat not applicable")?;
    let iid: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            let mut g = rng::stream(8, "acceptance-draws", c);
            (0..1000).map(|_| normal(&mut g)).collect()
        })
        .collect();
    let e = ess(&iid).map_err(|e| e.to_string())?.ok_or("ESS not applicable")?;
    check(
        (r - closed).abs() < 1e-9 && e > 3200.0 && e < 4800.0,
        format!("R-hat {r:.12} vs sqrt(19/6) {closed:.12}; i.i.d. ESS {e:.0} in (3200, 4800)"),
    )
}

// Criterion 9: byte-identical outputs across repeated runs.

fn workflow(dir: &Path, data: &Path) -> Result<(), String> {
    let d = |s: &str| dir.join(s);
    bayesfit(&["split", "--data", p(data), "--test-fraction", "0.3", "--seed", "11", "--out", p(&d("split"))])?;
    bayesfit(&[
        "fit", "--data", p(data), "--target", "y", "--test-fraction", "0.3", "--seed", "11", "--plots", "--out",
        p(&d("linear-advi")),
    ])?;
    bayesfit(&[
        "fit", "--engine", "nuts", "--data", p(data), "--target", "y", "--seed", "11", "--plots", "--draws", "300",
        "--warmup", "300", "--out", p(&d("linear-nuts")),
    ])?;
    bayesfit(&[
        "fit", "--model", "gp", "--data", p(&d("split/train.csv")), "--target", "y", "--seed", "11", "--steps",
        "2000", "--out", p(&d("gp-advi")),
    ])?;
    bayesfit(&[
        "fit", "--model", "gp", "--engine", "nuts", "--data", p(&d("split/train.csv")), "--target", "y", "--seed",
        "11", "--chains", "2", "--draws", "200", "--warmup", "200", "--out", p(&d("gp-nuts")),
    ])?;
    for run in ["linear-advi", "linear-nuts", "gp-advi", "gp-nuts"] {
        let model = d(run).join("model.bml");
        let preds = bayesfit(&["predict", "--model-file", p(&model), "--data", p(&d("split/test.csv"))])?;
        fs::write(d(run).join("predictions.csv"), preds).map_err(|e| e.to_string())?;
        bayesfit(&["diagnose", "--model-file", p(&model), "--plots", "--out", p(&d(run).join("diagnose"))])?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(dir: &Path) -> Outcome {
    let data = synthetic_csv(dir);
    let (a, b) = (dir.join("a"), dir.join("b"));
    workflow(&a, &data)?;
    workflow(&b, &data)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    // The library-level fits are repeated too.
    let lib_same = conjugate_fit()?.1.posterior == conjugate_fit()?.1.posterior;
    check(
        differing.is_empty() && lib_same,
        if differing.is_empty() {
            format!("{} files byte-identical across two runs; library refit identical: {lib_same}", fa.len())
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
        other => other,
    };
    (outcome, elapsed)
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let secs = Duration::from_secs;
    let mut conjugate = None;
    let mut results: Vec<(u32, Outcome, Duration)> = Vec::new();

    let (o, t) = timed(secs(10), criterion_1);
    results.push((1, o, t));
    let (o, t) = timed(secs(30), || {
        let fit = conjugate_fit()?;
        let o = criterion_2(&fit);
        conjugate = Some(fit);
        o
    });
    results.push((2, o, t));
    let (o, t) = timed(secs(120), criterion_3);
    results.push((3, o, t));
    let (o, t) = timed(secs(60), criterion_4);
    results.push((4, o, t));
    let (o, t) = timed(secs(60), criterion_5);
    results.push((5, o, t));
    let o = match &conjugate {
        Some(fit) => criterion_6(fit),
        None => Err("conjugate fit failed".into()),
    };
    results.push((6, o, Duration::ZERO));
    let (o, t) = timed(secs(60), || criterion_7(&dir.path().join("c7")));
    results.push((7, o, t));
    let (o, t) = timed(secs(60), criterion_8);
    results.push((8, o, t));
    let (o, t) = (criterion_9(&dir.path().join("c9")), Duration::ZERO);
    results.push((9, o, t));

    let mut failed = 0;
    for (n, outcome, t) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let time = if t.is_zero() { String::new() } else { format!(" [{t:.2?}]") };
        println!("criterion {n}: {tag}{time}: {detail}");
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
