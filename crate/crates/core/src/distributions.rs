//! Prior and likelihood families, their samplers, and the bijections that move
//! constrained parameters onto the real line.
//!
//! Every density has a taped form ([`Distribution::log_pdf_taped`]) used inside
//! log-joint evaluations. The untaped [`Distribution::log_pdf`] runs the same
//! taped expression on a scratch tape, so both agree to the last bit. Points
//! outside the support have log density `-inf`; that is a value, not an error.

use std::f64::consts::{LN_2, PI};

use rand::Rng as _;
use rand_distr::{Distribution as _, Gamma as GammaSampler, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Shape, Tape, Var};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// `½ ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("invalid {family} parameter: {detail}")]
    InvalidParameter { family: &'static str, detail: String },
    #[error("no transform for support {0}")]
    UnsupportedSupport(String),
}

/// Where a distribution puts its mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Support {
    Real,
    Positive,
    Interval { low: f64, high: f64 },
    RealVector(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mu: f64, sigma: f64 },
    HalfNormal { sigma: f64 },
    HalfCauchy { scale: f64 },
    /// Shape/rate parameterization.
    Gamma { shape: f64, rate: f64 },
    Uniform { low: f64, high: f64 },
    MultivariateNormal { mean: Vec<f64>, cov: Matrix },
}

fn positive(family: &'static str, name: &str, x: f64) -> Result<(), DistError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(DistError::InvalidParameter {
            family,
            detail: format!("{name} must be positive and finite, got {x}"),
        })
    }
}

impl Distribution {
    pub fn normal(mu: f64, sigma: f64) -> Result<Self, DistError> {
        positive("normal", "sigma", sigma)?;
        if !mu.is_finite() {
            return Err(DistError::InvalidParameter {
                family: "normal",
                detail: format!("mu must be finite, got {mu}"),
            });
        }
        Ok(Distribution::Normal { mu, sigma })
    }

    pub fn half_normal(sigma: f64) -> Result<Self, DistError> {
        positive("half_normal", "sigma", sigma)?;
        Ok(Distribution::HalfNormal { sigma })
    }

    pub fn half_cauchy(scale: f64) -> Result<Self, DistError> {
        positive("half_cauchy", "scale", scale)?;
        Ok(Distribution::HalfCauchy { scale })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self, DistError> {
        positive("gamma", "shape", shape)?;
        positive("gamma", "rate", rate)?;
        Ok(Distribution::Gamma { shape, rate })
    }

    pub fn uniform(low: f64, high: f64) -> Result<Self, DistError> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(DistError::InvalidParameter {
                family: "uniform",
                detail: format!("need finite low < high, got [{low}, {high}]"),
            });
        }
        Ok(Distribution::Uniform { low, high })
    }

    pub fn multivariate_normal(mean: Vec<f64>, cov: Matrix) -> Result<Self, DistError> {
        let n = mean.len();
        if cov.rows() != n || cov.cols() != n {
            return Err(DistError::InvalidParameter {
                family: "multivariate_normal",
                detail: format!("covariance is {}x{}, mean has length {n}", cov.rows(), cov.cols()),
            });
        }
        if let Err(e) = cov.cholesky() {
            return Err(DistError::InvalidParameter {
                family: "multivariate_normal",
                detail: format!("covariance not positive definite (pivot {})", e.pivot),
            });
        }
        Ok(Distribution::MultivariateNormal { mean, cov })
    }

    pub fn support(&self) -> Support {
        match self {
            Distribution::Normal { .. } => Support::Real,
            Distribution::HalfNormal { .. }
            | Distribution::HalfCauchy { .. }
            | Distribution::Gamma { .. } => Support::Positive,
            Distribution::Uniform { low, high } => Support::Interval {
                low: *low,
                high: *high,
            },
            Distribution::MultivariateNormal { mean, .. } => Support::RealVector(mean.len()),
        }
    }

    /// Dimension of one draw.
    pub fn dim(&self) -> usize {
        match self {
            Distribution::MultivariateNormal { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    fn in_support(&self, x: &[f64]) -> bool {
        match self.support() {
            Support::Real | Support::RealVector(_) => x.iter().all(|v| v.is_finite()),
            Support::Positive => x.iter().all(|&v| v >= 0.0 && v.is_finite()),
            Support::Interval { low, high } => x.iter().all(|&v| v >= low && v <= high),
        }
    }

    /// Log density of `x`, differentiable through the tape.
    ///
    /// For the univariate families `x` may be a vector; the result is then the
    /// sum over independent elements. A point outside the support yields a
    /// constant `-inf` node.
    pub fn log_pdf_taped<'t>(&self, x: Var<'t>) -> Result<Var<'t>, AdError> {
        let tape = x.tape();
        let xv = x.value();
        let n = xv.shape().len() as f64;
        if let Distribution::MultivariateNormal { mean, cov } = self {
            let mean = tape.constant(mean.clone());
            let cov = tape.constant(cov.clone());
            return mvn_log_pdf(x, mean, cov);
        }
        if !self.in_support(xv.data()) {
            return Ok(tape.constant(f64::NEG_INFINITY));
        }
        match *self {
            Distribution::Normal { mu, sigma } => x
                .shift(-mu)?
                .scale(1.0 / sigma)?
                .square()?
                .sum()?
                .scale(-0.5)?
                .shift(-n * (sigma.ln() + HALF_LN_2PI)),
            Distribution::HalfNormal { sigma } => x
                .scale(1.0 / sigma)?
                .square()?
                .sum()?
                .scale(-0.5)?
                .shift(n * (LN_2 - HALF_LN_2PI - sigma.ln())),
            Distribution::HalfCauchy { scale } => x
                .scale(1.0 / scale)?
                .square()?
                .shift(1.0)?
                .ln()?
                .sum()?
                .neg()?
                .shift(n * ((2.0 / PI).ln() - scale.ln())),
            Distribution::Gamma { shape, rate } => {
                let log_norm = shape * rate.ln() - statrs::function::gamma::ln_gamma(shape);
                let log_x = x.ln()?.scale(shape - 1.0)?;
                log_x
                    .sub(x.scale(rate)?)?
                    .sum()?
                    .shift(n * log_norm)
            }
            Distribution::Uniform { low, high } => {
                x.scale(0.0)?.sum()?.shift(-n * (high - low).ln())
            }
            Distribution::MultivariateNormal { .. } => unreachable!(),
        }
    }

    /// Log density of `x` (a single point for the multivariate family, or one
    /// or more independent points for the univariate ones).
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let tape = Tape::new();
        let xv = if x.len() == 1 && self.dim() == 1 {
            tape.constant(x[0])
        } else {
            tape.constant(x.to_vec())
        };
        match self.log_pdf_taped(xv) {
            Ok(v) => v.scalar(),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// `n` independent draws, flattened row-major (`n * dim()` values).
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim());
        match self {
            Distribution::Normal { mu, sigma } => {
                out.extend((0..n).map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal)));
            }
            Distribution::HalfNormal { sigma } => {
                out.extend((0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal).abs()));
            }
            Distribution::HalfCauchy { scale } => {
                out.extend((0..n).map(|_| {
                    let u: f64 = rng.random();
                    scale * (0.5 * PI * u).tan()
                }));
            }
            Distribution::Gamma { shape, rate } => {
                let g = GammaSampler::new(*shape, 1.0 / rate).expect("validated parameters");
                out.extend((0..n).map(|_| g.sample(rng)));
            }
            Distribution::Uniform { low, high } => {
                out.extend((0..n).map(|_| {
                    let u: f64 = rng.random();
                    (low + (high - low) * u).clamp(*low, *high)
                }));
            }
            Distribution::MultivariateNormal { mean, cov } => {
                let l = cov.cholesky().expect("validated covariance");
                let d = mean.len();
                for _ in 0..n {
                    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    for i in 0..d {
                        let s: f64 = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
                        out.push(mean[i] + s);
                    }
                }
            }
        }
        out
    }
}

/// Multivariate normal log density with taped mean and covariance.
///
/// A covariance that fails to factor propagates as
/// [`AdError::NotPositiveDefinite`] so callers can retry with jitter.
pub fn mvn_log_pdf<'t>(x: Var<'t>, mean: Var<'t>, cov: Var<'t>) -> Result<Var<'t>, AdError> {
    let n = match x.shape() {
        Shape::Vector(n) => n,
        s => {
            return Err(AdError::Shape {
                op: "mvn_log_pdf",
                detail: format!("point must be a vector, got {s}"),
            })
        }
    };
    let l = cov.cholesky()?;
    let alpha = l.solve_lower(x.sub(mean)?)?;
    alpha
        .dot(alpha)?
        .scale(-0.5)?
        .sub(l.log_diag_sum()?)?
        .shift(-(n as f64) * HALF_LN_2PI)
}

/// Bijection from a constrained support onto the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
    /// Scaled logit onto `(low, high)`.
    LogitInterval { low: f64, high: f64 },
}

/// Picks the transform for a support: identity for reals, log for positive
/// reals, scaled logit for bounded intervals.
pub fn transform_for(support: Support) -> Result<Transform, DistError> {
    match support {
        Support::Real | Support::RealVector(_) => Ok(Transform::Identity),
        Support::Positive => Ok(Transform::Log),
        Support::Interval { low, high } if low < high && low.is_finite() && high.is_finite() => {
            Ok(Transform::LogitInterval { low, high })
        }
        s => Err(DistError::UnsupportedSupport(format!("{s:?}"))),
    }
}

impl Transform {
    /// Constrained → unconstrained.
    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::LogitInterval { low, high } => ((x - low) / (high - x)).ln(),
        }
    }

    /// Unconstrained → constrained.
    pub fn inverse(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => z,
            Transform::Log => z.exp(),
            Transform::LogitInterval { low, high } => {
                low + (high - low) * (-crate::autodiff::softplus(-z)).exp()
            }
        }
    }

    /// `ln |d inverse(z) / dz|`.
    pub fn log_abs_det_jacobian(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Log => z,
            Transform::LogitInterval { low, high } => {
                (high - low).ln() - crate::autodiff::softplus(-z) - crate::autodiff::softplus(z)
            }
        }
    }

    /// Taped inverse map: the constrained value (same shape as `z`) and the
    /// summed log-Jacobian as a scalar.
    pub fn inverse_taped<'t>(&self, z: Var<'t>) -> Result<(Var<'t>, Var<'t>), AdError> {
        match *self {
            Transform::Identity => {
                let zero = z.tape().constant(0.0);
                Ok((z, zero))
            }
            Transform::Log => Ok((z.exp()?, z.sum()?)),
            Transform::LogitInterval { low, high } => {
                let minus_sp_neg = z.neg()?.softplus()?.neg()?;
                let theta = minus_sp_neg.exp()?.scale(high - low)?.shift(low)?;
                let n = z.shape().len() as f64;
                let log_j = minus_sp_neg
                    .sub(z.softplus()?)?
                    .sum()?
                    .shift(n * (high - low).ln())?;
                Ok((theta, log_j))
            }
        }
    }
}
