//! Bayesian linear regression `y ~ Normal(Xw + b, σ)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_predict_input, default_feature_names, posterior_draws, r2_score, run_engine,
    validate_training, Engine, EstimatorState, FittedArtifact, ModelKind, ModelSpec, ModelsError,
    NoisePrior, Normalization, FORMAT_VERSION,
};
use crate::autodiff::{AdError, Tape, Var};
use crate::distributions::{Distribution, HALF_LN_2PI};
use crate::linalg::{dot, Matrix};
use crate::model::{Likelihood, ModelGraph, Params};

/// Priors on the standardized scale: `w_j ~ Normal(0, weight_scale)`,
/// `b ~ Normal(0, intercept_scale)`, noise per [`NoisePrior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressionSpec {
    pub weight_scale: f64,
    pub intercept_scale: f64,
    pub noise: NoisePrior,
    /// Trace draws used by `predict`.
    pub predict_draws: usize,
}

impl Default for LinearRegressionSpec {
    fn default() -> Self {
        Self {
            weight_scale: 10.0,
            intercept_scale: 10.0,
            noise: NoisePrior::HalfNormal { scale: 1.0 },
            predict_draws: 1000,
        }
    }
}

impl LinearRegressionSpec {
    fn validate(&self) -> Result<(), ModelsError> {
        for (name, v) in [("weight_scale", self.weight_scale), ("intercept_scale", self.intercept_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelsError::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        if self.predict_draws == 0 {
            return Err(ModelsError::Usage("predict_draws must be at least 1".into()));
        }
        self.noise.validate()
    }

    fn builder(&self, d: usize) -> Result<crate::model::ModelBuilder, ModelsError> {
        self.validate()?;
        let mut b = ModelGraph::builder()
            .vector("w", d, Distribution::normal(0.0, self.weight_scale)?)
            .scalar("b", Distribution::normal(0.0, self.intercept_scale)?);
        if let NoisePrior::HalfNormal { scale } = self.noise {
            b = b.scalar("sigma", Distribution::half_normal(scale)?);
        }
        Ok(b)
    }
}

struct LinearLikelihood {
    x: Matrix,
    y: Vec<f64>,
    fixed_sigma: Option<f64>,
}

impl Likelihood for LinearLikelihood {
    fn data_len(&self) -> usize {
        self.y.len()
    }

    fn log_likelihood<'t>(
        &self,
        params: &Params<'t>,
        batch: &[usize],
        tape: &'t Tape,
    ) -> Result<Var<'t>, AdError> {
        let (x, y) = if batch.len() == self.y.len() {
            (self.x.clone(), self.y.clone())
        } else {
            (self.x.select_rows(batch), batch.iter().map(|&i| self.y[i]).collect())
        };
        let n = y.len() as f64;
        let mu = tape.constant(x).matvec(params.get("w"))?.add(params.get("b"))?;
        let r = tape.constant(y).sub(mu)?;
        match self.fixed_sigma {
            Some(s) => r
                .scale(1.0 / s)?
                .square()?
                .sum()?
                .scale(-0.5)?
                .shift(-n * (s.ln() + HALF_LN_2PI)),
            None => {
                let sigma = params.get("sigma");
                r.div(sigma)?
                    .square()?
                    .sum()?
                    .scale(-0.5)?
                    .sub(sigma.ln()?.scale(n)?)?
                    .shift(-n * HALF_LN_2PI)
            }
        }
    }
}

/// Linear-regression model graph over `x`, `y` as given (no standardization).
///
/// Blocks: `w` (one weight per column), `b`, and `sigma` unless the noise is
/// fixed.
pub fn linear_model_graph(
    x: &Matrix,
    y: &[f64],
    spec: &LinearRegressionSpec,
) -> Result<ModelGraph, ModelsError> {
    if x.rows() != y.len() {
        return Err(ModelsError::Data(format!(
            "feature matrix has {} rows but target has {} values",
            x.rows(),
            y.len()
        )));
    }
    let fixed_sigma = match spec.noise {
        NoisePrior::Fixed { sigma } => Some(sigma),
        NoisePrior::HalfNormal { .. } => None,
    };
    Ok(spec
        .builder(x.cols())?
        .likelihood(LinearLikelihood {
            x: x.clone(),
            y: y.to_vec(),
            fixed_sigma,
        })
        .build()?)
}

/// Bayesian linear regression estimator.
///
/// ```
/// use bayesfit::advi::AdviConfig;
/// use bayesfit::linalg::Matrix;
/// use bayesfit::models::{Engine, LinearRegression};
///
/// let x = Matrix::from_fn(20, 1, |i, _| i as f64 / 10.0);
/// let y: Vec<f64> = (0..20).map(|i| 2.0 * (i as f64 / 10.0) + 1.0 + 0.05 * ((i * 7 % 5) as f64 - 2.0)).collect();
/// let mut lr = LinearRegression::default();
/// lr.fit(&x, &y, &Engine::Advi(AdviConfig { steps: 3000, ..AdviConfig::default() })).unwrap();
/// let yhat = lr.predict(&Matrix::from_rows(&[vec![3.0]])).unwrap();
/// assert!((yhat[0] - 7.0).abs() < 0.2);
/// ```
#[derive(Debug, Clone, Default)]
pub struct LinearRegression {
    spec: LinearRegressionSpec,
    feature_names: Option<Vec<String>>,
    state: Option<EstimatorState>,
}

impl LinearRegression {
    pub fn new(spec: LinearRegressionSpec) -> Self {
        Self {
            spec,
            feature_names: None,
            state: None,
        }
    }

    /// Column names used in error messages and summaries.
    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn spec(&self) -> &LinearRegressionSpec {
        &self.spec
    }

    pub fn from_state(state: EstimatorState) -> Result<Self, ModelsError> {
        match &state.spec {
            ModelSpec::LinearRegression(spec) => Ok(Self {
                spec: spec.clone(),
                feature_names: Some(state.feature_names.clone()),
                state: Some(state),
            }),
            other => Err(ModelsError::Persist(super::PersistError::KindMismatch {
                expected: ModelKind::LinearRegression.as_str(),
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

    pub fn fit(&mut self, x: &Matrix, y: &[f64], engine: &Engine) -> Result<&mut Self, ModelsError> {
        self.spec.validate()?;
        let names = self
            .feature_names
            .clone()
            .unwrap_or_else(|| default_feature_names(x.cols()));
        validate_training(x, y, &names)?;
        let norm = Normalization::from_data(x, y, &names)?;
        let m = linear_model_graph(&norm.scale_x(x), &norm.scale_y(y), &self.spec)?;
        let artifact = run_engine(&m, engine)?;
        self.state = Some(EstimatorState {
            version: FORMAT_VERSION,
            spec: ModelSpec::LinearRegression(self.spec.clone()),
            feature_names: names,
            normalization: norm,
            artifact,
            train: None,
            seed: engine.seed(),
        });
        Ok(self)
    }

    /// Prior-only graph with the fitted block layout.
    pub fn layout(&self) -> Result<ModelGraph, ModelsError> {
        let state = self.state.as_ref().ok_or(ModelsError::NotFitted)?;
        Ok(self.spec.builder(state.normalization.dim())?.build()?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, ModelsError> {
        Ok(self.predict_with_std(x)?.0)
    }

    /// Posterior-predictive mean and sd in original target units.
    pub fn predict_with_std(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>), ModelsError> {
        let state = self.state.as_ref().ok_or(ModelsError::NotFitted)?;
        check_predict_input(state, x)?;
        let norm = &state.normalization;
        let xs = norm.scale_x(x);
        let d = norm.dim();
        let (mean, var) = match &state.artifact {
            FittedArtifact::Variational { posterior, .. } => {
                let sd = posterior.sd();
                let noise_var = match self.spec.noise {
                    NoisePrior::Fixed { sigma } => sigma * sigma,
                    NoisePrior::HalfNormal { .. } => {
                        // σ = exp(ζ) with ζ ~ Normal(m, s): E[σ²] = exp(2m + 2s²).
                        let (m, s) = (posterior.mu[d + 1], sd[d + 1]);
                        (2.0 * m + 2.0 * s * s).exp()
                    }
                };
                let mut mean = Vec::with_capacity(x.rows());
                let mut var = Vec::with_capacity(x.rows());
                for i in 0..xs.rows() {
                    let row = xs.row(i);
                    mean.push(dot(row, &posterior.mu[..d]) + posterior.mu[d]);
                    let v: f64 = row.iter().zip(&sd[..d]).map(|(a, s)| a * a * s * s).sum();
                    var.push(v + sd[d] * sd[d] + noise_var);
                }
                (mean, var)
            }
            FittedArtifact::Trace(_) => {
                let layout = self.layout()?;
                let draws = posterior_draws(&state.artifact, &layout, self.spec.predict_draws, state.seed);
                let s = draws.len() as f64;
                let mut sum = vec![0.0; xs.rows()];
                let mut sum_sq = vec![0.0; xs.rows()];
                let mut noise = 0.0;
                for dr in &draws {
                    noise += match self.spec.noise {
                        NoisePrior::Fixed { sigma } => sigma * sigma,
                        NoisePrior::HalfNormal { .. } => dr[d + 1] * dr[d + 1],
                    };
                    for i in 0..xs.rows() {
                        let m = dot(xs.row(i), &dr[..d]) + dr[d];
                        sum[i] += m;
                        sum_sq[i] += m * m;
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
                let var = mean
                    .iter()
                    .zip(&sum_sq)
                    .map(|(m, sq)| (sq / s - m * m).max(0.0) + noise / s)
                    .collect();
                (mean, var)
            }
        };
        Ok((
            mean.iter().map(|&m| norm.unscale_mean(m)).collect(),
            var.iter().map(|v| v.sqrt() * norm.y_sd).collect(),
        ))
    }

    /// R² of the posterior-predictive means.
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
