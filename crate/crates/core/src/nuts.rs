//! No-U-Turn sampling with multinomial trajectory sampling, dual-averaging
//! step-size adaptation and diagonal mass-matrix adaptation.
//!
//! Each transition draws a momentum, then repeatedly doubles a leapfrog
//! trajectory in a random direction. Doubling stops when the trajectory (or
//! any subtree of it) starts to turn back on itself, when the energy error
//! exceeds [`DIVERGENCE_THRESHOLD`], or at the maximum depth. The next state
//! is drawn from the trajectory with weights `exp(-H)`: uniformly progressive
//! inside subtrees and biased towards the newer half at the top level.
//!
//! Warmup runs dual averaging on `ln ε` throughout. The diagonal inverse mass
//! is estimated from positions in the third quarter of warmup; after it is
//! installed, the step size is re-initialised and adapted again over the last
//! quarter.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LogDensity, ModelGraph};
use crate::rng::{self, purpose, Rng};

/// Energy error (nats) beyond which a trajectory is marked divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NutsError {
    #[error("invalid NUTS configuration: {0}")]
    Config(String),
    #[error("chain {chain}: no finite log density found near the initial point")]
    Initialization { chain: usize },
}

/// Position, momentum and the cached log density and gradient at the position.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    /// Evaluates the target at `q`.
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>, p: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let log_density = target.log_density_and_grad(&q, &mut grad);
        Self {
            q,
            p,
            log_density,
            grad,
        }
    }

    pub fn kinetic_energy(&self, inv_mass: &[f64]) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(inv_mass)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    /// `H = -log p(q) + ½ pᵀ M⁻¹ p`; `+inf` when the density is not finite.
    pub fn energy(&self, inv_mass: &[f64]) -> f64 {
        let h = -self.log_density + self.kinetic_energy(inv_mass);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, inv_mass: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
    }

    fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// One leapfrog step of size `eps` against `U(q) = -log p(q)`.
pub fn leapfrog<T: LogDensity + ?Sized>(z: &PhasePoint, eps: f64, target: &T, inv_mass: &[f64]) -> PhasePoint {
    let d = z.q.len();
    let mut p: Vec<f64> = (0..d).map(|i| z.p[i] + 0.5 * eps * z.grad[i]).collect();
    let q: Vec<f64> = (0..d).map(|i| z.q[i] + eps * inv_mass[i] * p[i]).collect();
    let mut grad = vec![0.0; d];
    let log_density = target.log_density_and_grad(&q, &mut grad);
    for i in 0..d {
        p[i] += 0.5 * eps * grad[i];
    }
    PhasePoint {
        q,
        p,
        log_density,
        grad,
    }
}

/// The trajectory from `minus` to `plus` has started to turn back:
/// `(q⁺ − q⁻)·v⁻ < 0` or `(q⁺ − q⁻)·v⁺ < 0`, with `v = M⁻¹p`.
pub fn is_u_turn(q_minus: &[f64], q_plus: &[f64], v_minus: &[f64], v_plus: &[f64]) -> bool {
    let mut dm = 0.0;
    let mut dp = 0.0;
    for i in 0..q_minus.len() {
        let dq = q_plus[i] - q_minus[i];
        dm += dq * v_minus[i];
        dp += dq * v_plus[i];
    }
    dm < 0.0 || dp < 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAverageSettings {
    pub target_accept: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl Default for DualAverageSettings {
    fn default() -> Self {
        Self {
            target_accept: 0.8,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }
}

/// Dual-averaging adaptation of `ln ε` with shrinkage target `ln(10 ε₀)`.
#[derive(Debug, Clone)]
pub struct DualAverage {
    settings: DualAverageSettings,
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_bar: f64,
    count: u64,
}

impl DualAverage {
    pub fn new(settings: DualAverageSettings, initial_step: f64) -> Self {
        Self {
            settings,
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: 0.0,
            h_bar: 0.0,
            count: 0,
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        self.count += 1;
        let t = self.count as f64;
        let s = &self.settings;
        let w = 1.0 / (t + s.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (s.target_accept - accept_stat);
        self.log_step = self.mu - t.sqrt() / s.gamma * self.h_bar;
        let eta = t.powf(-s.kappa);
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg;
    }

    /// Step size for the next warmup iteration.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged iterate, used once adaptation ends.
    pub fn adapted(&self) -> f64 {
        if self.count == 0 {
            self.log_step.exp()
        } else {
            self.log_step_avg.exp()
        }
    }
}

/// Step sizes a dual-averaging run proposes for a sequence of acceptance statistics.
pub fn adapt_step_size(accept_stats: &[f64], target_accept: f64, initial_step: f64) -> Vec<f64> {
    let mut da = DualAverage::new(
        DualAverageSettings {
            target_accept,
            ..DualAverageSettings::default()
        },
        initial_step,
    );
    accept_stats
        .iter()
        .map(|&a| {
            da.update(a);
            da.current()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutsConfig {
    pub chains: usize,
    pub draws: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    pub init_jitter: f64,
    pub adapt_mass: bool,
    /// Keep warmup positions in the trace (never used in summaries).
    pub keep_warmup: bool,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            draws: 1000,
            warmup: 1000,
            target_accept: 0.8,
            max_depth: 10,
            seed: 0,
            init_jitter: 0.2,
            adapt_mass: true,
            keep_warmup: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub accept_stat: f64,
    pub energy: f64,
}

#[derive(Debug, Clone)]
struct Subtree {
    near: PhasePoint,
    far: PhasePoint,
    proposal: PhasePoint,
    log_weight: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    turning: bool,
    divergent: bool,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A NUTS transition kernel over `target` with fixed step size and metric.
pub struct NutsKernel<'a, T: LogDensity + ?Sized> {
    pub target: &'a T,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub max_depth: usize,
}

impl<T: LogDensity + ?Sized> NutsKernel<'_, T> {
    fn turning(&self, minus: &PhasePoint, plus: &PhasePoint) -> bool {
        is_u_turn(
            &minus.q,
            &plus.q,
            &minus.velocity(&self.inv_mass),
            &plus.velocity(&self.inv_mass),
        )
    }

    fn build(&self, start: &PhasePoint, dir: f64, depth: usize, h0: f64, rng: &mut Rng) -> Subtree {
        if depth == 0 {
            let z = leapfrog(start, dir * self.step_size, self.target, &self.inv_mass);
            let h = z.energy(&self.inv_mass);
            let delta = h - h0;
            let divergent = !z.is_finite() || !(delta <= DIVERGENCE_THRESHOLD);
            let accept = if delta.is_finite() { (-delta).exp().min(1.0) } else { 0.0 };
            let log_weight = if delta.is_finite() { -delta } else { f64::NEG_INFINITY };
            return Subtree {
                near: z.clone(),
                far: z.clone(),
                proposal: z,
                log_weight,
                sum_accept: accept,
                n_leapfrog: 1,
                turning: false,
                divergent,
            };
        }
        let first = self.build(start, dir, depth - 1, h0, rng);
        if first.divergent || first.turning {
            return first;
        }
        let second = self.build(&first.far, dir, depth - 1, h0, rng);
        let n_leapfrog = first.n_leapfrog + second.n_leapfrog;
        let sum_accept = first.sum_accept + second.sum_accept;
        if second.divergent || second.turning {
            return Subtree {
                n_leapfrog,
                sum_accept,
                ..second
            };
        }
        let log_weight = log_add_exp(first.log_weight, second.log_weight);
        let take_second = rng.random::<f64>().ln() < second.log_weight - log_weight;
        let proposal = if take_second { second.proposal } else { first.proposal };
        let turning = if dir > 0.0 {
            self.turning(&first.near, &second.far)
        } else {
            self.turning(&second.far, &first.near)
        };
        Subtree {
            near: first.near,
            far: second.far,
            proposal,
            log_weight,
            sum_accept,
            n_leapfrog,
            turning,
            divergent: false,
        }
    }

    /// One transition from `z` (whose momentum is ignored and redrawn).
    pub fn transition(&self, z: &PhasePoint, rng: &mut Rng) -> (PhasePoint, IterationStats) {
        let d = z.q.len();
        let mut start = z.clone();
        start.p = (0..d)
            .map(|i| rng.sample::<f64, _>(StandardNormal) / self.inv_mass[i].sqrt())
            .collect();
        let h0 = start.energy(&self.inv_mass);
        let mut minus = start.clone();
        let mut plus = start.clone();
        let mut proposal = start;
        let mut log_weight = 0.0;
        let mut sum_accept = 0.0;
        let mut n_leapfrog = 0;
        let mut divergent = false;
        let mut depth = 0;
        while depth < self.max_depth {
            let forward = rng.random::<bool>();
            let dir = if forward { 1.0 } else { -1.0 };
            let edge = if forward { &plus } else { &minus };
            let sub = self.build(edge, dir, depth, h0, rng);
            depth += 1;
            n_leapfrog += sub.n_leapfrog;
            sum_accept += sub.sum_accept;
            if sub.divergent {
                divergent = true;
                break;
            }
            if sub.turning {
                break;
            }
            if rng.random::<f64>().ln() < sub.log_weight - log_weight {
                proposal = sub.proposal;
            }
            log_weight = log_add_exp(log_weight, sub.log_weight);
            if forward {
                plus = sub.far;
            } else {
                minus = sub.far;
            }
            if self.turning(&minus, &plus) {
                break;
            }
        }
        let stats = IterationStats {
            divergent,
            tree_depth: depth,
            n_leapfrog,
            step_size: self.step_size,
            accept_stat: if n_leapfrog > 0 { sum_accept / n_leapfrog as f64 } else { 0.0 },
            energy: proposal.energy(&self.inv_mass),
        };
        (proposal, stats)
    }
}

/// Doubles or halves a unit step until the one-step acceptance ratio crosses ½.
fn initial_step_size<T: LogDensity + ?Sized>(target: &T, z: &PhasePoint, inv_mass: &[f64], rng: &mut Rng) -> f64 {
    let d = z.q.len();
    let mut start = z.clone();
    start.p = (0..d)
        .map(|i| rng.sample::<f64, _>(StandardNormal) / inv_mass[i].sqrt())
        .collect();
    let h0 = start.energy(inv_mass);
    let log_ratio = |eps: f64| {
        let h = leapfrog(&start, eps, target, inv_mass).energy(inv_mass);
        let r = h0 - h;
        if r.is_nan() {
            f64::NEG_INFINITY
        } else {
            r
        }
    };
    let mut eps: f64 = 1.0;
    let up = log_ratio(eps) > 0.5f64.ln();
    for _ in 0..100 {
        let lr = log_ratio(eps);
        if up {
            if !(lr > 0.5f64.ln()) {
                break;
            }
            eps *= 2.0;
        } else {
            if lr > 0.5f64.ln() {
                break;
            }
            eps *= 0.5;
        }
    }
    if up {
        eps *= 0.5;
    }
    eps.clamp(1e-10, 1e3)
}

#[derive(Debug, Default, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Sample variances shrunk towards `1e-3·I`.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// One chain in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChain {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<IterationStats>,
    pub warmup_draws: Vec<Vec<f64>>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

fn validate(config: &NutsConfig) -> Result<(), NutsError> {
    if config.chains == 0 || config.draws == 0 {
        return Err(NutsError::Config("chains and draws must be at least 1".into()));
    }
    if config.max_depth == 0 {
        return Err(NutsError::Config("max_depth must be at least 1".into()));
    }
    if !(config.target_accept > 0.0 && config.target_accept < 1.0) {
        return Err(NutsError::Config(format!(
            "target_accept must lie in (0, 1), got {}",
            config.target_accept
        )));
    }
    if !(config.init_jitter >= 0.0) {
        return Err(NutsError::Config("init_jitter must be non-negative".into()));
    }
    Ok(())
}

/// Runs one chain on `target` from `init` jittered by `U(-j, j)` per coordinate.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    config: &NutsConfig,
    chain: usize,
) -> Result<RawChain, NutsError> {
    validate(config)?;
    let d = target.dim();
    let mut rng = rng::stream(config.seed, purpose::NUTS_CHAIN, chain as u64);
    let mut z = None;
    for _ in 0..100 {
        let q: Vec<f64> = init
            .iter()
            .map(|&x| {
                if config.init_jitter > 0.0 {
                    x + rng.random_range(-config.init_jitter..config.init_jitter)
                } else {
                    x
                }
            })
            .collect();
        let cand = PhasePoint::new(target, q, vec![0.0; d]);
        if cand.is_finite() {
            z = Some(cand);
            break;
        }
    }
    let mut z = z.ok_or(NutsError::Initialization { chain })?;

    let mut inv_mass = vec![1.0; d];
    let settings = DualAverageSettings {
        target_accept: config.target_accept,
        ..DualAverageSettings::default()
    };
    let mut da = DualAverage::new(settings, initial_step_size(target, &z, &inv_mass, &mut rng));
    let w = config.warmup;
    let mass_window = if config.adapt_mass && w >= 20 {
        Some((w / 2, 3 * w / 4))
    } else {
        None
    };
    let mut welford = Welford::default();
    let mut warmup_draws = Vec::new();

    for i in 0..w {
        if let Some((_, hi)) = mass_window {
            if i == hi && welford.n >= 3 {
                inv_mass = welford.regularized_variance();
                da = DualAverage::new(settings, initial_step_size(target, &z, &inv_mass, &mut rng));
            }
        }
        let kernel = NutsKernel {
            target,
            step_size: da.current(),
            inv_mass: inv_mass.clone(),
            max_depth: config.max_depth,
        };
        let (next, stats) = kernel.transition(&z, &mut rng);
        da.update(stats.accept_stat);
        z = next;
        if let Some((lo, hi)) = mass_window {
            if i >= lo && i < hi {
                welford.push(&z.q);
            }
        }
        if config.keep_warmup {
            warmup_draws.push(z.q.clone());
        }
    }

    let step_size = da.adapted();
    let kernel = NutsKernel {
        target,
        step_size,
        inv_mass: inv_mass.clone(),
        max_depth: config.max_depth,
    };
    let mut draws = Vec::with_capacity(config.draws);
    let mut stats = Vec::with_capacity(config.draws);
    for _ in 0..config.draws {
        let (next, s) = kernel.transition(&z, &mut rng);
        z = next;
        draws.push(z.q.clone());
        stats.push(s);
    }
    Ok(RawChain {
        draws,
        stats,
        warmup_draws,
        step_size,
        inv_mass,
    })
}

/// Runs `config.chains` independent chains, in parallel, each on its own stream.
pub fn sample_density<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    config: &NutsConfig,
) -> Result<Vec<RawChain>, NutsError> {
    validate(config)?;
    if init.len() != target.dim() {
        return Err(NutsError::Config(format!(
            "initial point has length {}, target dimension is {}",
            init.len(),
            target.dim()
        )));
    }
    let results: Vec<Result<RawChain, NutsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| s.spawn(move || run_chain(target, init, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Draws from one chain, in constrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    /// `draws[i][k]`: iteration `i`, element `k`.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<IterationStats>,
    #[serde(default)]
    pub warmup_draws: Vec<Vec<f64>>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

/// Layout of one named block inside a draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockView {
    pub name: String,
    pub offset: usize,
    pub size: usize,
}

/// Post-warmup draws of every chain plus per-iteration sampler statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Element names (`w[0]`, `b`, ...) in draw order.
    pub names: Vec<String>,
    pub blocks: Vec<BlockView>,
    pub chains: Vec<ChainTrace>,
    pub warmup: usize,
    pub warnings: Vec<String>,
}

impl Trace {
    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn num_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    /// Draws of element `k` as chains × iterations.
    pub fn element(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[k]).collect())
            .collect()
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of a named block: chains × iterations × block size.
    pub fn block(&self, name: &str) -> Option<Vec<Vec<Vec<f64>>>> {
        let b = self.blocks.iter().find(|b| b.name == name)?;
        Some(
            self.chains
                .iter()
                .map(|c| c.draws.iter().map(|d| d[b.offset..b.offset + b.size].to_vec()).collect())
                .collect(),
        )
    }

    /// All draws of all chains, chain-major.
    pub fn pooled_draws(&self) -> Vec<&[f64]> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }
}

/// Samples the posterior of `m` and returns constrained draws.
pub fn sample(m: &ModelGraph, config: &NutsConfig) -> Result<Trace, NutsError> {
    let raw = sample_density(m, &m.init_point(), config)?;
    let chains: Vec<ChainTrace> = raw
        .into_iter()
        .map(|c| ChainTrace {
            draws: c.draws.iter().map(|q| m.constrain(q)).collect(),
            stats: c.stats,
            warmup_draws: c.warmup_draws.iter().map(|q| m.constrain(q)).collect(),
            step_size: c.step_size,
            inv_mass: c.inv_mass,
        })
        .collect();
    let mut trace = Trace {
        names: m.element_names(),
        blocks: m
            .blocks()
            .iter()
            .map(|b| BlockView {
                name: b.name.clone(),
                offset: b.offset,
                size: b.size(),
            })
            .collect(),
        chains,
        warmup: config.warmup,
        warnings: Vec::new(),
    };
    let total = trace.num_chains() * trace.num_draws();
    let div = trace.divergences();
    if div * 10 > total {
        trace.warnings.push(format!(
            "{div} of {total} post-warmup iterations diverged; consider a higher target_accept or re-parameterizing"
        ));
    }
    Ok(trace)
}
