//! Mean-field Gaussian variational inference.
//!
//! The approximation is `q(ζ) = Π N(ζ_i | μ_i, exp(ω_i)²)` on the model's
//! unconstrained space. The ELBO
//!
//! ```text
//! L(μ, ω) = E_q[log p(ζ, y)] + H(q),    H(q) = D/2 (1 + ln 2π) + Σ ω_i
//! ```
//!
//! is estimated by reparameterized draws `ζ = μ + exp(ω) ⊙ ε`, `ε ~ N(0, I)`,
//! and maximized with Adam.

use rand::Rng as _;
use rand::seq::index;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelGraph};
use crate::rng::{self, purpose, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdviError {
    #[error("invalid ADVI configuration: {0}")]
    Config(String),
    #[error(
        "ADVI diverged: {consecutive} consecutive steps without a finite log density (step {step}); \
         try a smaller learning rate or re-parameterize the model"
    )]
    Diverged { step: usize, consecutive: usize },
    #[error("variational parameters must be finite and of equal length")]
    InvalidPosterior,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean-field Gaussian over the unconstrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    /// Log standard deviations.
    pub omega: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, omega: Vec<f64>) -> Result<Self, AdviError> {
        if mu.len() != omega.len() || mu.iter().chain(&omega).any(|x| !x.is_finite()) {
            return Err(AdviError::InvalidPosterior);
        }
        Ok(Self { mu, omega })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.omega.iter().map(|w| w.exp()).collect()
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (1.0 + LN_2PI) + self.omega.iter().sum::<f64>()
    }

    /// `ζ = μ + exp(ω) ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.omega)
            .zip(eps)
            .map(|((m, w), e)| m + w.exp() * e)
            .collect()
    }

    /// `n` draws in unconstrained space.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let eps = standard_normal(rng, self.dim());
                self.reparameterize(&eps)
            })
            .collect()
    }
}

pub(crate) fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-step ELBO estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboHistory {
    pub values: Vec<f64>,
    pub window: usize,
}

impl ElboHistory {
    pub fn new(window: usize) -> Self {
        Self {
            values: Vec::new(),
            window: window.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trailing mean over the last `window` finite entries at each step.
    pub fn smoothed(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.smoothed_at(i)).collect()
    }

    pub fn smoothed_at(&self, i: usize) -> f64 {
        let lo = (i + 1).saturating_sub(self.window);
        finite_mean(&self.values[lo..=i])
    }
}

fn finite_mean(xs: &[f64]) -> f64 {
    let (s, n) = xs
        .iter()
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NEG_INFINITY
    } else {
        s / n as f64
    }
}

/// ELBO estimate and its reparameterized gradient for one set of noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    /// `-inf` if any draw had a non-finite log joint.
    pub elbo: f64,
    pub grad_mu: Vec<f64>,
    pub grad_omega: Vec<f64>,
    /// Draws with a finite log joint and gradient; the gradient averages these.
    pub finite_draws: usize,
}

/// ELBO and gradient with the standard-normal draws `eps` supplied by the caller.
pub fn elbo_with_noise(
    q: &VariationalPosterior,
    m: &ModelGraph,
    eps: &[Vec<f64>],
    batch: &[usize],
) -> Result<ElboEstimate, AdviError> {
    let d = q.dim();
    if d != m.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: m.dim(),
            got: d,
        }
        .into());
    }
    if eps.is_empty() {
        return Err(AdviError::Config("need at least one Monte Carlo draw".into()));
    }
    let sd = q.sd();
    let mut sum_lp = 0.0;
    let mut grad_mu = vec![0.0; d];
    let mut grad_omega = vec![0.0; d];
    let mut finite = 0usize;
    for e in eps {
        let zeta = q.reparameterize(e);
        let (lp, g) = m.value_and_grad(&zeta, batch)?;
        sum_lp += lp;
        if !lp.is_finite() || g.iter().any(|x| !x.is_finite()) {
            continue;
        }
        finite += 1;
        for i in 0..d {
            grad_mu[i] += g[i];
            grad_omega[i] += g[i] * e[i] * sd[i];
        }
    }
    let elbo = if sum_lp.is_finite() {
        sum_lp / eps.len() as f64 + q.entropy()
    } else {
        f64::NEG_INFINITY
    };
    if finite > 0 {
        let k = finite as f64;
        for i in 0..d {
            grad_mu[i] /= k;
            grad_omega[i] = grad_omega[i] / k + 1.0;
        }
    }
    Ok(ElboEstimate {
        elbo,
        grad_mu,
        grad_omega,
        finite_draws: finite,
    })
}

fn draw_noise(rng: &mut Rng, n_mc: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n_mc).map(|_| standard_normal(rng, d)).collect()
}

/// Monte Carlo ELBO estimate with `n_mc` draws.
pub fn elbo_estimate(
    q: &VariationalPosterior,
    m: &ModelGraph,
    n_mc: usize,
    batch: &[usize],
    rng: &mut Rng,
) -> Result<f64, AdviError> {
    let eps = draw_noise(rng, n_mc, q.dim());
    Ok(elbo_with_noise(q, m, &eps, batch)?.elbo)
}

/// Reparameterized ELBO gradient `(∂μ, ∂ω)` with `n_mc` draws.
pub fn elbo_gradient(
    q: &VariationalPosterior,
    m: &ModelGraph,
    n_mc: usize,
    batch: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>), AdviError> {
    let eps = draw_noise(rng, n_mc, q.dim());
    let est = elbo_with_noise(q, m, &eps, batch)?;
    Ok((est.grad_mu, est.grad_omega))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviConfig {
    pub steps: usize,
    pub n_mc: usize,
    /// `None` or `Some(N)` uses every data point each step.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub convergence_window: usize,
    pub convergence_tol: f64,
}

impl Default for AdviConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            n_mc: 1,
            batch_size: None,
            learning_rate: 0.01,
            seed: 0,
            convergence_window: 100,
            convergence_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdviFit {
    pub posterior: VariationalPosterior,
    pub history: ElboHistory,
    /// Steps where no draw had a finite log joint.
    pub skipped_steps: usize,
    /// Step at which the windowed ELBO stopped changing, if it did.
    pub converged_at: Option<usize>,
}

const OMEGA_INIT: f64 = -1.0;
const MAX_CONSECUTIVE_SKIPS: usize = 50;

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step on `params` along `grad`.
    fn ascend(&mut self, params: &mut [&mut f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            **p += self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Fits a mean-field approximation to `m` by stochastic gradient ascent on the ELBO.
///
/// Starts at `μ = init_point`, `ω = -1`. Stops after `config.steps` steps, or
/// earlier once the mean ELBO over consecutive `convergence_window`-step
/// windows changes by less than `convergence_tol` relative.
pub fn fit_advi(m: &ModelGraph, config: &AdviConfig) -> Result<AdviFit, AdviError> {
    if config.steps == 0 || config.n_mc == 0 {
        return Err(AdviError::Config("steps and n_mc must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(AdviError::Config("learning rate must be positive".into()));
    }
    let n = m.data_len();
    let batch_size = match config.batch_size {
        Some(b) if b > n && n > 0 => {
            return Err(AdviError::Config(format!("batch size {b} exceeds data size {n}")))
        }
        Some(0) if n > 0 => return Err(AdviError::Config("batch size must be at least 1".into())),
        Some(b) => b,
        None => n,
    };
    let d = m.dim();
    let full = m.full_batch();
    let mut q = VariationalPosterior {
        mu: m.init_point(),
        omega: vec![OMEGA_INIT; d],
    };
    let mut noise = rng::stream(config.seed, purpose::ADVI_NOISE, 0);
    let mut batch_rng = rng::stream(config.seed, purpose::ADVI_BATCH, 0);
    let mut adam = Adam::new(config.learning_rate, 2 * d);
    let mut history = ElboHistory::new(config.convergence_window);
    let mut skipped = 0;
    let mut consecutive = 0;
    let mut converged_at = None;
    let w = history.window;

    for step in 0..config.steps {
        let batch: Vec<usize> = if batch_size >= n {
            full.clone()
        } else {
            let mut idx = index::sample(&mut batch_rng, n, batch_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let eps = draw_noise(&mut noise, config.n_mc, d);
        let est = elbo_with_noise(&q, m, &eps, &batch)?;
        history.values.push(est.elbo);
        if est.finite_draws == 0 {
            skipped += 1;
            consecutive += 1;
            if consecutive > MAX_CONSECUTIVE_SKIPS {
                return Err(AdviError::Diverged { step, consecutive });
            }
            continue;
        }
        consecutive = 0;
        let grad: Vec<f64> = est.grad_mu.iter().chain(&est.grad_omega).copied().collect();
        {
            let (mu, omega) = (&mut q.mu, &mut q.omega);
            let mut params: Vec<&mut f64> = mu.iter_mut().chain(omega.iter_mut()).collect();
            adam.ascend(&mut params, &grad);
        }
        let done = step + 1;
        if done % w == 0 && done >= 2 * w {
            let prev = finite_mean(&history.values[done - 2 * w..done - w]);
            let cur = finite_mean(&history.values[done - w..done]);
            if prev.is_finite() && cur.is_finite() && (cur - prev).abs() < config.convergence_tol * prev.abs() {
                converged_at = Some(done);
                break;
            }
        }
    }
    Ok(AdviFit {
        posterior: q,
        history,
        skipped_steps: skipped,
        converged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;

    fn std_normal_target() -> ModelGraph {
        ModelGraph::builder()
            .scalar("x", Distribution::normal(0.0, 1.0).unwrap())
            .build()
            .unwrap()
    }

    #[test]
    fn entropy_closed_form() {
        let q = VariationalPosterior::new(vec![0.0], vec![0.0]).unwrap();
        assert!((q.entropy() - 1.418_938_5).abs() < 1e-7);
        let q = VariationalPosterior::new(vec![0.0; 3], vec![0.2, -0.4, 1.1]).unwrap();
        let direct = 0.5
            * ((2.0 * std::f64::consts::PI * std::f64::consts::E).powi(3)
                * q.omega.iter().map(|w| (2.0 * w).exp()).product::<f64>())
            .ln();
        assert!((q.entropy() - direct).abs() < 1e-12);
    }

    #[test]
    fn exact_match_has_zero_elbo_in_expectation() {
        let m = std_normal_target();
        let q = VariationalPosterior::new(vec![0.0], vec![0.0]).unwrap();
        let mut r = rng::stream(1, "test", 0);
        let e = elbo_estimate(&q, &m, 100_000, &[], &mut r).unwrap();
        assert!(e.abs() < 0.01, "{e}");
    }

    #[test]
    fn shifted_q_has_elbo_minus_half() {
        let m = std_normal_target();
        let q = VariationalPosterior::new(vec![1.0], vec![0.0]).unwrap();
        let mut r = rng::stream(2, "test", 0);
        let e = elbo_estimate(&q, &m, 100_000, &[], &mut r).unwrap();
        assert!((e + 0.5).abs() < 0.01, "{e}");
    }

    #[test]
    fn gradient_at_shifted_q() {
        let m = std_normal_target();
        let q = VariationalPosterior::new(vec![1.0], vec![0.0]).unwrap();
        let mut r = rng::stream(3, "test", 0);
        let n = 100_000;
        let (mut gm, mut gw) = (0.0, 0.0);
        for _ in 0..n {
            let (a, b) = elbo_gradient(&q, &m, 1, &[], &mut r).unwrap();
            gm += a[0];
            gw += b[0];
        }
        gm /= n as f64;
        gw /= n as f64;
        assert!((gm + 1.0).abs() < 0.02, "{gm}");
        assert!(gw.abs() < 0.02, "{gw}");
    }

    #[test]
    fn prior_only_fit_recovers_prior() {
        let m = std_normal_target();
        let cfg = AdviConfig {
            steps: 5000,
            convergence_tol: 0.0,
            seed: 4,
            ..AdviConfig::default()
        };
        let fit = fit_advi(&m, &cfg).unwrap();
        assert!(fit.posterior.mu[0].abs() < 0.05, "{:?}", fit.posterior);
        assert!(fit.posterior.omega[0].abs() < 0.1, "{:?}", fit.posterior);
        assert_eq!(fit.history.len(), 5000);
    }

    #[test]
    fn fit_is_deterministic() {
        let m = std_normal_target();
        let cfg = AdviConfig {
            steps: 300,
            seed: 9,
            ..AdviConfig::default()
        };
        assert_eq!(fit_advi(&m, &cfg).unwrap(), fit_advi(&m, &cfg).unwrap());
    }

    #[test]
    fn smoothing_uses_trailing_window() {
        let h = ElboHistory {
            values: vec![1.0, 2.0, 3.0, 4.0],
            window: 2,
        };
        assert_eq!(h.smoothed(), vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn config_errors() {
        let m = std_normal_target();
        let cfg = AdviConfig {
            steps: 0,
            ..AdviConfig::default()
        };
        assert!(matches!(fit_advi(&m, &cfg), Err(AdviError::Config(_))));
    }
}
