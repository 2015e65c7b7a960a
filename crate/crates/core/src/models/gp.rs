//! Gaussian-process regression with an isotropic squared-exponential kernel.
//!
//! The latent function is integrated out, so the model over the
//! hyperparameters is the marginal likelihood
//! `y ~ MVNormal(0, K + σ_n²·I)` with `K_ij = σ_f²·exp(−‖x_i − x_j‖²/(2ℓ²))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_predict_input, default_feature_names, posterior_draws, r2_score, run_engine,
    validate_training, Engine, EstimatorState, ModelKind, ModelSpec, ModelsError,
    NoisePrior, Normalization, TrainingData, FORMAT_VERSION,
};
use crate::autodiff::{AdError, Tape, Var};
use crate::distributions::{Distribution, HALF_LN_2PI};
use crate::linalg::{dot, solve_lower, solve_lower_transposed, Matrix};
use crate::model::{Likelihood, ModelGraph, Params};

/// Diagonal jitter, relative to the mean kernel diagonal, tried in order.
pub const JITTER_LEVELS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Priors on the standardized scale: `ℓ ~ HalfCauchy(lengthscale_scale)`,
/// `σ_f ~ HalfNormal(signal_scale)`, noise per [`NoisePrior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPRegressorSpec {
    pub lengthscale_scale: f64,
    pub signal_scale: f64,
    pub noise: NoisePrior,
    /// Hyperparameter draws averaged over by `predict`.
    pub predict_draws: usize,
}

impl Default for GPRegressorSpec {
    fn default() -> Self {
        Self {
            lengthscale_scale: 5.0,
            signal_scale: 1.0,
            noise: NoisePrior::HalfNormal { scale: 1.0 },
            predict_draws: 200,
        }
    }
}

impl GPRegressorSpec {
    fn validate(&self) -> Result<(), ModelsError> {
        for (name, v) in [("lengthscale_scale", self.lengthscale_scale), ("signal_scale", self.signal_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelsError::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        if self.predict_draws == 0 {
            return Err(ModelsError::Usage("predict_draws must be at least 1".into()));
        }
        self.noise.validate()
    }

    fn builder(&self) -> Result<crate::model::ModelBuilder, ModelsError> {
        self.validate()?;
        let mut b = ModelGraph::builder()
            .scalar("lengthscale", Distribution::half_cauchy(self.lengthscale_scale)?)
            .scalar("signal", Distribution::half_normal(self.signal_scale)?);
        if let NoisePrior::HalfNormal { scale } = self.noise {
            b = b.scalar("noise", Distribution::half_normal(scale)?);
        }
        Ok(b)
    }

    fn fixed_noise(&self) -> Option<f64> {
        match self.noise {
            NoisePrior::Fixed { sigma } => Some(sigma),
            NoisePrior::HalfNormal { .. } => None,
        }
    }
}

/// `D_ij = ‖a_i − b_j‖²`.
pub fn squared_distances(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(u, v)| (u - v) * (u - v))
            .sum()
    })
}

/// Squared-exponential kernel matrix between the rows of `a` and `b`.
pub fn se_kernel(a: &Matrix, b: &Matrix, lengthscale: f64, signal: f64) -> Matrix {
    let d2 = squared_distances(a, b);
    let s2 = signal * signal;
    let c = 1.0 / (2.0 * lengthscale * lengthscale);
    Matrix::from_fn(d2.rows(), d2.cols(), |i, j| s2 * (-d2[(i, j)] * c).exp())
}

/// Taped `log N(y | 0, K + σ_n²·I)`.
///
/// Jitter from [`JITTER_LEVELS`] (times `σ_f²`) is added to the diagonal until
/// the Cholesky factorization succeeds; if none does the result is a constant
/// `−∞`.
pub fn gp_marginal_log_likelihood<'t>(
    x: &Matrix,
    y: &[f64],
    lengthscale: Var<'t>,
    signal: Var<'t>,
    noise: Var<'t>,
) -> Result<Var<'t>, AdError> {
    let tape = lengthscale.tape();
    let n = y.len();
    let d2 = tape.constant(squared_distances(x, x));
    let eye = tape.constant(Matrix::identity(n));
    let sf2 = signal.square()?;
    let k = d2
        .div(lengthscale.square()?.scale(2.0)?)?
        .neg()?
        .exp()?
        .mul(sf2)?;
    let cov = k.add(eye.mul(noise.square()?)?)?;
    let yv = tape.constant(y.to_vec());
    for level in JITTER_LEVELS {
        let jittered = cov.add(tape.constant(Matrix::identity(n)).scale(level * sf2.scalar())?)?;
        match jittered.cholesky() {
            Ok(l) => {
                let z = l.solve_lower(yv)?;
                return z
                    .dot(z)?
                    .scale(-0.5)?
                    .sub(l.log_diag_sum()?)?
                    .shift(-(n as f64) * HALF_LN_2PI);
            }
            Err(AdError::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(tape.constant(f64::NEG_INFINITY))
}

struct GpLikelihood {
    x: Matrix,
    y: Vec<f64>,
    fixed_noise: Option<f64>,
}

impl Likelihood for GpLikelihood {
    fn data_len(&self) -> usize {
        self.y.len()
    }

    fn log_likelihood<'t>(
        &self,
        params: &Params<'t>,
        batch: &[usize],
        tape: &'t Tape,
    ) -> Result<Var<'t>, AdError> {
        let noise = match self.fixed_noise {
            Some(s) => tape.constant(s),
            None => params.get("noise"),
        };
        let (l, s) = (params.get("lengthscale"), params.get("signal"));
        if batch.len() == self.y.len() {
            gp_marginal_log_likelihood(&self.x, &self.y, l, s, noise)
        } else {
            let y: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
            gp_marginal_log_likelihood(&self.x.select_rows(batch), &y, l, s, noise)
        }
    }
}

/// GP model graph over `x`, `y` as given (no standardization).
///
/// Blocks: `lengthscale`, `signal`, and `noise` unless it is fixed.
pub fn gp_model_graph(x: &Matrix, y: &[f64], spec: &GPRegressorSpec) -> Result<ModelGraph, ModelsError> {
    if x.rows() != y.len() {
        return Err(ModelsError::Data(format!(
            "feature matrix has {} rows but target has {} values",
            x.rows(),
            y.len()
        )));
    }
    Ok(spec
        .builder()?
        .likelihood(GpLikelihood {
            x: x.clone(),
            y: y.to_vec(),
            fixed_noise: spec.fixed_noise(),
        })
        .build()?)
}

/// Cholesky factor of `k + (σ_n² + jitter)·I` with escalating jitter.
fn factor(k: &Matrix, signal2: f64, noise2: f64) -> Option<Matrix> {
    JITTER_LEVELS.iter().find_map(|level| {
        let mut a = k.clone();
        for i in 0..a.rows() {
            a[(i, i)] += noise2 + level * signal2;
        }
        a.cholesky().ok()
    })
}

/// Gaussian-process regression estimator.
#[derive(Debug, Clone, Default)]
pub struct GaussianProcessRegressor {
    spec: GPRegressorSpec,
    feature_names: Option<Vec<String>>,
    state: Option<EstimatorState>,
}

impl GaussianProcessRegressor {
    pub fn new(spec: GPRegressorSpec) -> Self {
        Self {
            spec,
            feature_names: None,
            state: None,
        }
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn spec(&self) -> &GPRegressorSpec {
        &self.spec
    }

    pub fn from_state(state: EstimatorState) -> Result<Self, ModelsError> {
        match &state.spec {
            ModelSpec::GaussianProcess(spec) => {
                if state.train.is_none() {
                    return Err(ModelsError::Persist(super::PersistError::Corrupt {
                        field: "train".into(),
                        detail: "a Gaussian process needs its training data".into(),
                    }));
                }
                Ok(Self {
                    spec: spec.clone(),
                    feature_names: Some(state.feature_names.clone()),
                    state: Some(state),
                })
            }
            other => Err(ModelsError::Persist(super::PersistError::KindMismatch {
                expected: ModelKind::GaussianProcess.as_str(),
                found: other.kind().as_str().to_owned(),
            })),
        }
    }

    pub fn state(&self) -> Option<&EstimatorState> {
        self.state.as_ref()
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    /// Fits the kernel hyperparameters. Mini-batching is rejected: the
    /// marginal likelihood does not factor over data points.
    pub fn fit(&mut self, x: &Matrix, y: &[f64], engine: &Engine) -> Result<&mut Self, ModelsError> {
        self.spec.validate()?;
        if let Engine::Advi(c) = engine {
            if matches!(c.batch_size, Some(b) if b < y.len()) {
                return Err(ModelsError::Usage(
                    "mini-batches are not supported for Gaussian-process regression".into(),
                ));
            }
        }
        let names = self
            .feature_names
            .clone()
            .unwrap_or_else(|| default_feature_names(x.cols()));
        validate_training(x, y, &names)?;
        let norm = Normalization::from_data(x, y, &names)?;
        let train = TrainingData {
            x: norm.scale_x(x),
            y: norm.scale_y(y),
        };
        let m = gp_model_graph(&train.x, &train.y, &self.spec)?;
        let artifact = run_engine(&m, engine)?;
        self.state = Some(EstimatorState {
            version: FORMAT_VERSION,
            spec: ModelSpec::GaussianProcess(self.spec.clone()),
            feature_names: names,
            normalization: norm,
            artifact,
            train: Some(train),
            seed: engine.seed(),
        });
        Ok(self)
    }

    /// Prior-only graph with the fitted block layout.
    pub fn layout(&self) -> Result<ModelGraph, ModelsError> {
        Ok(self.spec.builder()?.build()?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, ModelsError> {
        Ok(self.predict_with_std(x)?.0)
    }

    /// Posterior-predictive mean and sd in original units, averaged over
    /// hyperparameter draws by the law of total variance.
    pub fn predict_with_std(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>), ModelsError> {
        let state = self.state.as_ref().ok_or(ModelsError::NotFitted)?;
        check_predict_input(state, x)?;
        let train = state.train.as_ref().ok_or(ModelsError::NotFitted)?;
        let norm = &state.normalization;
        let xs = norm.scale_x(x);
        let layout = self.layout()?;
        let draws = posterior_draws(&state.artifact, &layout, self.spec.predict_draws, state.seed);
        let d2_train = squared_distances(&train.x, &train.x);
        let d2_cross = squared_distances(&xs, &train.x);
        let m = xs.rows();
        let mut sum = vec![0.0; m];
        let mut sum_sq = vec![0.0; m];
        let mut sum_var = vec![0.0; m];
        let mut used = 0usize;
        for dr in &draws {
            let (ell, sf) = (dr[0], dr[1]);
            let sn = self.spec.fixed_noise().unwrap_or_else(|| dr[2]);
            let (sf2, sn2) = (sf * sf, sn * sn);
            let c = 1.0 / (2.0 * ell * ell);
            let k = Matrix::from_fn(d2_train.rows(), d2_train.cols(), |i, j| sf2 * (-d2_train[(i, j)] * c).exp());
            let Some(l) = factor(&k, sf2, sn2) else {
                continue;
            };
            let alpha = solve_lower_transposed(&l, &solve_lower(&l, &train.y));
            for i in 0..m {
                let ks: Vec<f64> = d2_cross.row(i).iter().map(|d| sf2 * (-d * c).exp()).collect();
                let mean = dot(&ks, &alpha);
                let v = solve_lower(&l, &ks);
                let var = (sf2 - dot(&v, &v)).max(0.0) + sn2;
                sum[i] += mean;
                sum_sq[i] += mean * mean;
                sum_var[i] += var;
            }
            used += 1;
        }
        if used == 0 {
            return Err(ModelsError::Prediction(
                "kernel matrix not positive definite for any posterior draw".into(),
            ));
        }
        let s = used as f64;
        let mut mean = Vec::with_capacity(m);
        let mut sd = Vec::with_capacity(m);
        for i in 0..m {
            let mu = sum[i] / s;
            let var = sum_var[i] / s + (sum_sq[i] / s - mu * mu).max(0.0);
            mean.push(norm.unscale_mean(mu));
            sd.push(var.sqrt() * norm.y_sd);
        }
        Ok((mean, sd))
    }

    pub fn score(&self, x: &Matrix, y: &[f64]) -> Result<f64, ModelsError> {
        r2_score(y, &self.predict(x)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelsError> {
        self.state.as_ref().ok_or(ModelsError::NotFitted)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelsError> {
        Self::from_state(EstimatorState::load(path)?)
    }
}
