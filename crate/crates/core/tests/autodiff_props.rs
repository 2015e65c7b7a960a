use bayesfit::autodiff::{Tape, Var};
use bayesfit::linalg::Matrix;
use bayesfit::rng;
use proptest::prelude::*;
use rand::Rng as _;

const STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// A random scalar function of a length-4 vector, rebuilt on any tape from
/// the same seed.
fn composite<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    let mut r = rng::stream(seed, "test-composite", 0);
    let tape = x.tape();
    let mut pool: Vec<Var<'t>> = (0..4).map(|i| x.at(i).unwrap()).collect();
    let w = tape.constant(vec![0.5, -1.0, 0.25, 2.0]);
    pool.push(x.dot(w).unwrap());
    pool.push(x.slice(1, 2).unwrap().square().unwrap().sum().unwrap());
    let steps = r.random_range(4..10);
    for _ in 0..steps {
        let a = pool[r.random_range(0..pool.len())];
        let b = pool[r.random_range(0..pool.len())];
        let v = match r.random_range(0..11) {
            0 => a.add(b),
            1 => a.sub(b),
            2 => a.mul(b),
            3 => a.div(b.square().unwrap().shift(1.0).unwrap()),
            4 => a.scale(0.3).unwrap().exp(),
            5 => a.softplus(),
            6 => a.square().unwrap().shift(1.0).unwrap().ln(),
            7 => a.square().unwrap().shift(0.5).unwrap().powf(1.5),
            8 => a.neg(),
            9 => a.scale(-1.7),
            _ => a.shift(0.4),
        }
        .unwrap();
        // Keep magnitudes moderate so finite differences stay well conditioned.
        let v = v.scale(0.5).unwrap().softplus().unwrap().scale(2.0).unwrap();
        pool.push(v);
    }
    let mut out = pool[pool.len() - 1];
    for v in pool.iter().rev().skip(1).take(3) {
        out = out.add(*v).unwrap();
    }
    out
}

fn eval(x: &[f64], seed: u64) -> f64 {
    let tape = Tape::new();
    composite(tape.constant(x.to_vec()), seed).scalar()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_gradients_match_finite_differences(
        seed in any::<u64>(),
        x in proptest::collection::vec(-1.5f64..1.5, 4),
    ) {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let f = composite(xv, seed);
        let g = tape.backward(f).unwrap().wrt(xv).into_data();
        for i in 0..4 {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += STEP;
            lo[i] -= STEP;
            let fd = (eval(&hi, seed) - eval(&lo, seed)) / (2.0 * STEP);
            prop_assert!(rel_err(g[i], fd) < 1e-6, "dim {i}: ad {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn cholesky_round_trip(seed in any::<u64>(), n in 1usize..9) {
        let mut r = rng::stream(seed, "test-spd", 0);
        let m = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut a = m.matmul(&m.transpose());
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        let l = a.cholesky().unwrap();
        let back = l.matmul(&l.transpose());
        let diff = Matrix::from_fn(n, n, |i, j| back[(i, j)] - a[(i, j)]);
        prop_assert!(diff.frobenius_norm() / a.frobenius_norm() < 1e-12);
        let tape = Tape::new();
        let lt = tape.var(a.clone()).cholesky().unwrap().value().to_matrix();
        prop_assert_eq!(lt, l);
    }

    #[test]
    fn symmetric_matrix_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng::stream(seed, "test-spd", 1);
        let m = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut a = m.matmul(&m.transpose());
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let c = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        // logdet, quadratic form through both solves, and a matmul/matvec path.
        let f = |t: &Tape, av: Var<'_>| -> f64 { matrix_fn(t, av, &b, &c).scalar() };
        let tape = Tape::new();
        let av = tape.var(a.clone());
        let out = matrix_fn(&tape, av, &b, &c);
        let g = tape.backward(out).unwrap().wrt(av).to_matrix();
        for i in 0..n {
            for j in 0..=i {
                let bump = |s: f64| {
                    let mut p = a.clone();
                    p[(i, j)] += s;
                    if i != j {
                        p[(j, i)] += s;
                    }
                    let t = Tape::new();
                    let v = t.constant(p);
                    f(&t, v)
                };
                let fd = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
                let ad = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                prop_assert!(rel_err(ad, fd) < 1e-6, "({i},{j}) ad {ad} fd {fd}");
            }
        }
    }
}

fn matrix_fn<'t>(tape: &'t Tape, a: Var<'t>, b: &[f64], c: &Matrix) -> Var<'t> {
    let l = a.cholesky().unwrap();
    let bv = tape.constant(b.to_vec());
    let z = l.solve_lower(bv).unwrap();
    let w = l.solve_lower_transposed(z).unwrap();
    let cm = tape.constant(c.clone());
    let mixed = cm.matmul(a).unwrap().matvec(w).unwrap().sum().unwrap();
    l.log_diag_sum()
        .unwrap()
        .scale(2.0)
        .unwrap()
        .add(z.dot(z).unwrap())
        .unwrap()
        .add(mixed.scale(0.1).unwrap())
        .unwrap()
}

#[test]
fn adjoints_are_linear_in_the_output_scale() {
    let x0 = vec![0.3, -0.7, 1.1, 0.2];
    let grad = |c: Option<f64>| {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let mut f = composite(x, 7);
        if let Some(c) = c {
            f = f.scale(c).unwrap();
        }
        tape.backward(f).unwrap().wrt(x).into_data()
    };
    let base = grad(None);
    // Powers of two scale without rounding, so equality is exact.
    for c in [2.0, -0.5, 1024.0, -0.125] {
        let scaled = grad(Some(c));
        for (s, b) in scaled.iter().zip(&base) {
            assert_eq!(*s, c * b);
        }
    }
    // Other constants agree up to reassociation of the products.
    for c in [3.0, -0.1, 1e3 / 7.0] {
        let scaled = grad(Some(c));
        for (s, b) in scaled.iter().zip(&base) {
            assert!((s - c * b).abs() <= 4.0 * f64::EPSILON * (c * b).abs());
        }
    }
}

#[test]
fn identical_tapes_give_identical_gradients() {
    let x0 = vec![1.2, -0.4, 0.9, -1.3];
    let run = || {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let f = composite(x, 99);
        tape.backward(f).unwrap().wrt(x).into_data()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
