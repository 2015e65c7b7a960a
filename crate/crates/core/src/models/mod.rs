//! Estimators with a fit / predict / score / save / load surface.
//!
//! Both estimators standardize features and target before fitting, place
//! fixed weakly informative priors on the standardized scale, and map
//! predictions back to original units.

mod gp;
mod linear;
pub mod persist;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advi::{fit_advi, AdviConfig, AdviError, ElboHistory, VariationalPosterior};
use crate::distributions::DistError;
use crate::linalg::Matrix;
use crate::model::{ModelError, ModelGraph};
use crate::nuts::{self, NutsConfig, NutsError, Trace};
use crate::rng::{self, purpose};

pub use gp::{
    gp_marginal_log_likelihood, gp_model_graph, se_kernel, squared_distances, GPRegressorSpec,
    GaussianProcessRegressor, JITTER_LEVELS,
};
pub use linear::{linear_model_graph, LinearRegression, LinearRegressionSpec};
pub use persist::{PersistError, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum ModelsError {
    #[error("estimator is not fitted")]
    NotFitted,
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error("score is undefined: targets have zero variance")]
    UndefinedScore,
    #[error("prediction failed: {0}")]
    Prediction(String),
    #[error(transparent)]
    Advi(#[from] AdviError),
    #[error(transparent)]
    Nuts(#[from] NutsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

/// Prior on the observation noise sd, on the standardized target scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePrior {
    HalfNormal { scale: f64 },
    /// Noise sd known and held fixed.
    Fixed { sigma: f64 },
}

impl NoisePrior {
    fn validate(&self) -> Result<(), ModelsError> {
        let v = match *self {
            NoisePrior::HalfNormal { scale } => scale,
            NoisePrior::Fixed { sigma } => sigma,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(ModelsError::Usage(format!("noise prior parameter must be positive, got {v}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    GaussianProcess,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LinearRegression => "linear_regression",
            ModelKind::GaussianProcess => "gaussian_process",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearRegression(LinearRegressionSpec),
    GaussianProcess(GPRegressorSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::LinearRegression(_) => ModelKind::LinearRegression,
            ModelSpec::GaussianProcess(_) => ModelKind::GaussianProcess,
        }
    }
}

/// Inference engine and its settings.
#[derive(Debug, Clone, PartialEq)]
pub enum Engine {
    Advi(AdviConfig),
    Nuts(NutsConfig),
}

impl Engine {
    pub fn seed(&self) -> u64 {
        match self {
            Engine::Advi(c) => c.seed,
            Engine::Nuts(c) => c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedArtifact {
    Variational {
        posterior: VariationalPosterior,
        history: ElboHistory,
    },
    Trace(Trace),
}

impl FittedArtifact {
    pub fn history(&self) -> Option<&ElboHistory> {
        match self {
            FittedArtifact::Variational { history, .. } => Some(history),
            FittedArtifact::Trace(_) => None,
        }
    }

    pub fn trace(&self) -> Option<&Trace> {
        match self {
            FittedArtifact::Trace(t) => Some(t),
            FittedArtifact::Variational { .. } => None,
        }
    }
}

/// Feature and target centring/scaling, population sd.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_sd: vec![1.0; d],
            y_mean: 0.0,
            y_sd: 1.0,
        }
    }

    /// Rejects constant feature columns and a constant target.
    pub fn from_data(x: &Matrix, y: &[f64], names: &[String]) -> Result<Self, ModelsError> {
        let (m, s) = mean_sd(y);
        if !(s > 0.0) {
            return Err(ModelsError::Data("target is constant".into()));
        }
        let mut x_mean = Vec::with_capacity(x.cols());
        let mut x_sd = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let (cm, cs) = mean_sd(&x.column(j));
            if !(cs > 0.0) {
                return Err(ModelsError::Data(format!("column {} is constant", names[j])));
            }
            x_mean.push(cm);
            x_sd.push(cs);
        }
        Ok(Self {
            x_mean,
            x_sd,
            y_mean: m,
            y_sd: s,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn scale_x(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_sd[j])
    }

    pub fn scale_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_sd).collect()
    }

    pub fn unscale_mean(&self, m: f64) -> f64 {
        m * self.y_sd + self.y_mean
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Standardized training data kept for GP prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub x: Matrix,
    pub y: Vec<f64>,
}

/// Everything a fitted estimator needs to predict, and everything persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub version: u32,
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub normalization: Normalization,
    pub artifact: FittedArtifact,
    pub train: Option<TrainingData>,
    pub seed: u64,
}

impl EstimatorState {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelsError> {
        Ok(persist::save_state(self, path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelsError> {
        Ok(persist::load_state(path)?)
    }
}

/// Default feature names `x0`, `x1`, ...
pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

pub(crate) fn validate_training(
    x: &Matrix,
    y: &[f64],
    names: &[String],
) -> Result<(), ModelsError> {
    if x.rows() != y.len() {
        return Err(ModelsError::Data(format!(
            "feature matrix has {} rows but target has {} values",
            x.rows(),
            y.len()
        )));
    }
    if names.len() != x.cols() {
        return Err(ModelsError::Usage(format!(
            "{} feature names for {} columns",
            names.len(),
            x.cols()
        )));
    }
    if x.rows() < 2 {
        return Err(ModelsError::Data(format!("need at least 2 rows, got {}", x.rows())));
    }
    if x.cols() == 0 {
        return Err(ModelsError::Data("no feature columns".into()));
    }
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if !x[(i, j)].is_finite() {
                return Err(ModelsError::Data(format!("non-finite value at row index {i}, column {}", names[j])));
            }
        }
        if !y[i].is_finite() {
            return Err(ModelsError::Data(format!("non-finite target at row index {i}")));
        }
    }
    Ok(())
}

pub(crate) fn check_predict_input(state: &EstimatorState, x: &Matrix) -> Result<(), ModelsError> {
    if x.cols() != state.normalization.dim() {
        return Err(ModelsError::Usage(format!(
            "model was fitted on {} features, got {}",
            state.normalization.dim(),
            x.cols()
        )));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(ModelsError::Data("non-finite feature value".into()));
    }
    Ok(())
}

pub(crate) fn run_engine(m: &ModelGraph, engine: &Engine) -> Result<FittedArtifact, ModelsError> {
    match engine {
        Engine::Advi(c) => {
            let fit = fit_advi(m, c)?;
            Ok(FittedArtifact::Variational {
                posterior: fit.posterior,
                history: fit.history,
            })
        }
        Engine::Nuts(c) => Ok(FittedArtifact::Trace(nuts::sample(m, c)?)),
    }
}

/// Up to `count` constrained posterior draws: fresh draws from a variational
/// posterior, or an evenly thinned subset of the pooled trace.
pub(crate) fn posterior_draws(
    artifact: &FittedArtifact,
    layout: &ModelGraph,
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    match artifact {
        FittedArtifact::Variational { posterior, .. } => {
            let mut r = rng::stream(seed, purpose::PREDICT, 0);
            posterior
                .sample(&mut r, count)
                .iter()
                .map(|z| layout.constrain(z))
                .collect()
        }
        FittedArtifact::Trace(t) => {
            let pooled = t.pooled_draws();
            if pooled.len() <= count {
                return pooled.iter().map(|d| d.to_vec()).collect();
            }
            (0..count)
                .map(|i| pooled[i * pooled.len() / count].to_vec())
                .collect()
        }
    }
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2_score(y: &[f64], y_hat: &[f64]) -> Result<f64, ModelsError> {
    if y.len() != y_hat.len() {
        return Err(ModelsError::Usage(format!(
            "{} targets but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(ModelsError::Data("no rows to score".into()));
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(ModelsError::UndefinedScore);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// A fitted estimator of either kind, as read back from a model file.
#[derive(Debug, Clone)]
pub enum Estimator {
    Linear(LinearRegression),
    Gp(GaussianProcessRegressor),
}

impl Estimator {
    pub fn from_state(state: EstimatorState) -> Result<Self, ModelsError> {
        Ok(match state.kind() {
            ModelKind::LinearRegression => Estimator::Linear(LinearRegression::from_state(state)?),
            ModelKind::GaussianProcess => Estimator::Gp(GaussianProcessRegressor::from_state(state)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelsError> {
        Self::from_state(EstimatorState::load(path)?)
    }

    pub fn state(&self) -> Option<&EstimatorState> {
        match self {
            Estimator::Linear(e) => e.state(),
            Estimator::Gp(e) => e.state(),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, ModelsError> {
        match self {
            Estimator::Linear(e) => e.predict(x),
            Estimator::Gp(e) => e.predict(x),
        }
    }

    pub fn predict_with_std(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>), ModelsError> {
        match self {
            Estimator::Linear(e) => e.predict_with_std(x),
            Estimator::Gp(e) => e.predict_with_std(x),
        }
    }

    pub fn score(&self, x: &Matrix, y: &[f64]) -> Result<f64, ModelsError> {
        r2_score(y, &self.predict(x)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelsError> {
        self.state().ok_or(ModelsError::NotFitted)?.save(path)
    }

    /// Prior-only graph with the fitted block layout, used to constrain draws.
    pub fn layout(&self) -> Result<ModelGraph, ModelsError> {
        match self {
            Estimator::Linear(e) => e.layout(),
            Estimator::Gp(e) => e.layout(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_hand_values() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(matches!(r2_score(&[1.0, 1.0], &[1.0, 2.0]), Err(ModelsError::UndefinedScore)));
    }

    #[test]
    fn normalization_rejects_constant_column() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]);
        let names = vec!["a".to_string(), "b".to_string()];
        let err = Normalization::from_data(&x, &[1.0, 2.0, 4.0], &names).unwrap_err();
        assert!(err.to_string().contains("column b"), "{err}");
    }

    #[test]
    fn normalization_uses_population_sd() {
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        let n = Normalization::from_data(&x, &[0.0, 4.0], &default_feature_names(1)).unwrap();
        assert_eq!(n.x_mean, vec![2.0]);
        assert_eq!(n.x_sd, vec![1.0]);
        assert_eq!((n.y_mean, n.y_sd), (2.0, 2.0));
        assert_eq!(n.scale_y(&[0.0, 4.0]), vec![-1.0, 1.0]);
    }
}
