use std::collections::BTreeMap;

use bayesfit::distributions::Distribution;
use bayesfit::linalg::Matrix;
use bayesfit::model::{IidNormalLikelihood, ModelGraph};
use bayesfit::models::{gp_model_graph, linear_model_graph, GPRegressorSpec, LinearRegressionSpec};
use bayesfit::rng;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn sixteen_points() -> (Matrix, Vec<f64>) {
    let mut r = rng::stream(5, "test-data", 0);
    let x = Matrix::from_fn(16, 2, |i, j| (i as f64 / 15.0) * 2.0 - 1.0 + 0.3 * j as f64 * ((i % 3) as f64 - 1.0));
    let y = (0..16)
        .map(|i| 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)] + 1.0 + 0.1 * normal(&mut r))
        .collect();
    (x, y)
}

fn max_fd_error(m: &ModelGraph, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "test-points", 0);
    let batch = m.full_batch();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let z: Vec<f64> = (0..m.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, g) = m.value_and_grad(&z, &batch).unwrap();
        for i in 0..m.dim() {
            let h = 1e-5;
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (m.log_joint_value(&hi).unwrap() - m.log_joint_value(&lo).unwrap()) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1.0));
        }
    }
    worst
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let (x, y) = sixteen_points();
    let m = linear_model_graph(&x, &y, &LinearRegressionSpec::default()).unwrap();
    let err = max_fd_error(&m, 1);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn gp_gradient_matches_finite_differences() {
    let (x, y) = sixteen_points();
    let m = gp_model_graph(&x, &y, &GPRegressorSpec::default()).unwrap();
    let err = max_fd_error(&m, 2);
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn shipped_models_are_finite_at_init() {
    let (x, y) = sixteen_points();
    let lin = linear_model_graph(&x.select_rows(&[0, 5, 9]), &[y[0], y[5], y[9]], &LinearRegressionSpec::default()).unwrap();
    assert!(lin.log_joint_value(&lin.init_point()).unwrap().is_finite());
    let gp = gp_model_graph(&x, &y, &GPRegressorSpec::default()).unwrap();
    assert!(gp.log_joint_value(&gp.init_point()).unwrap().is_finite());
    assert_eq!(gp.constrain(&gp.init_point()), vec![1.0, 1.0, 1.0]);
    let one = Matrix::from_fn(16, 1, |i, _| x[(i, 0)]);
    let lin = linear_model_graph(&one, &y, &LinearRegressionSpec::default()).unwrap();
    assert_eq!(lin.init_point(), vec![0.0, 0.0, 0.0]);
}

#[test]
fn all_pairs_average_to_the_full_batch() {
    let y = vec![0.3, -1.2, 2.5, 0.0, 1.7, -0.4];
    let m = ModelGraph::builder()
        .scalar("mu", Distribution::normal(0.0, 3.0).unwrap())
        .likelihood(IidNormalLikelihood::new(y, 0.8, "mu").unwrap())
        .build()
        .unwrap();
    for z in [-1.0, 0.2, 2.0] {
        let full = m.value_and_grad(&[z], &m.full_batch()).unwrap().0;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..6 {
            for j in i + 1..6 {
                total += m.value_and_grad(&[z], &[i, j]).unwrap().0;
                count += 1;
            }
        }
        assert_eq!(count, 15);
        let avg = total / count as f64;
        assert!((avg - full).abs() < 1e-12 * full.abs(), "{avg} vs {full}");
    }
}

#[test]
fn half_normal_density_integrates_on_the_unconstrained_scale() {
    let m = ModelGraph::builder()
        .scalar("s", Distribution::half_normal(1.0).unwrap())
        .build()
        .unwrap();
    let (a, b, n) = (-30.0, 5.0, 200_000);
    let h = (b - a) / n as f64;
    let f = |z: f64| m.log_joint_value(&[z]).unwrap().exp();
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    let total = h * (0.5 * f(a) + inner + 0.5 * f(b));
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

proptest! {
    #[test]
    fn flatten_unflatten_round_trip(w in proptest::collection::vec(-5.0f64..5.0, 3), s in 1e-3f64..50.0) {
        let m = ModelGraph::builder()
            .vector("w", 3, Distribution::normal(0.0, 1.0).unwrap())
            .scalar("s", Distribution::half_normal(1.0).unwrap())
            .scalar("p", Distribution::uniform(0.0, 1.0).unwrap())
            .build()
            .unwrap();
        let mut values = BTreeMap::new();
        values.insert("w".to_string(), w.clone());
        values.insert("s".to_string(), vec![s]);
        values.insert("p".to_string(), vec![0.25]);
        let z = m.flatten(&values).unwrap();
        let back = m.unflatten(&z).unwrap();
        for (k, v) in &values {
            for (a, b) in v.iter().zip(&back[k]) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{k}: {a} vs {b}");
            }
        }
    }
}
