//! Assembly of named parameter blocks and a likelihood into one log-joint
//! density over a flat unconstrained vector.
//!
//! The unconstrained vector `ζ` is tiled by the blocks in declaration order.
//! Each block maps its slice through the inverse of the transform its prior's
//! support calls for, adds the prior density and the log-Jacobian, and hands
//! the constrained value to the likelihood. When the likelihood is evaluated on
//! a mini-batch, only the likelihood term is rescaled by `N / |batch|`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::distributions::{self, DistError, Distribution, Transform};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("duplicate parameter block `{0}`")]
    DuplicateBlock(String),
    #[error("unconstrained vector has length {got}, model dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter names do not match the model: missing [{}], unexpected [{}]", missing.join(", "), extra.join(", "))]
    BlockNames { missing: Vec<String>, extra: Vec<String> },
    #[error("block `{name}` expects {expected} values, got {got}")]
    BlockSize { name: String, expected: usize, got: usize },
    #[error("value {value} for block `{name}` is outside the prior support")]
    OutOfSupport { name: String, value: f64 },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("batch index {index} out of range for {len} data points")]
    BatchIndex { index: usize, len: usize },
    #[error("empty batch for a model with a likelihood")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Distribution(#[from] DistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockShape {
    Scalar,
    Vector(usize),
}

impl BlockShape {
    pub fn len(self) -> usize {
        match self {
            BlockShape::Scalar => 1,
            BlockShape::Vector(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: BlockShape,
    pub prior: Distribution,
    pub transform: Transform,
    pub offset: usize,
}

impl ParamBlock {
    pub fn size(&self) -> usize {
        self.shape.len()
    }

    /// Element names, `w[0]`, `w[1]`, ... for vector blocks.
    pub fn element_names(&self) -> Vec<String> {
        match self.shape {
            BlockShape::Scalar => vec![self.name.clone()],
            BlockShape::Vector(n) => (0..n).map(|i| format!("{}[{i}]", self.name)).collect(),
        }
    }
}

/// Constrained parameter values on a tape, looked up by block name.
pub struct Params<'t> {
    values: Vec<(String, Var<'t>)>,
}

impl<'t> Params<'t> {
    /// Panics when `name` is not a block of the model; likelihoods are written
    /// against a known block layout.
    pub fn get(&self, name: &str) -> Var<'t> {
        self.values
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no parameter block named `{name}`"))
    }
}

/// Data term of a model. Implementations validate their data on construction.
pub trait Likelihood: Send + Sync {
    /// Number of data points `N`.
    fn data_len(&self) -> usize;

    /// Log-likelihood of the rows in `batch` (sorted, unique indices).
    fn log_likelihood<'t>(
        &self,
        params: &Params<'t>,
        batch: &[usize],
        tape: &'t Tape,
    ) -> Result<Var<'t>, AdError>;
}

/// A differentiable log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. Failures
    /// are reported as a non-finite return value.
    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;
}

pub struct ModelGraph {
    blocks: Vec<ParamBlock>,
    likelihood: Option<Box<dyn Likelihood>>,
    dim: usize,
}

impl std::fmt::Debug for ModelGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("blocks", &self.blocks)
            .field("data_len", &self.data_len())
            .field("dim", &self.dim)
            .finish()
    }
}

#[derive(Default)]
pub struct ModelBuilder {
    blocks: Vec<(String, BlockShape, Distribution)>,
    likelihood: Option<Box<dyn Likelihood>>,
}

impl ModelBuilder {
    pub fn scalar(mut self, name: &str, prior: Distribution) -> Self {
        self.blocks.push((name.to_owned(), BlockShape::Scalar, prior));
        self
    }

    /// A block of `len` independent draws from a univariate `prior`, or one
    /// draw of a multivariate prior of dimension `len`.
    pub fn vector(mut self, name: &str, len: usize, prior: Distribution) -> Self {
        self.blocks.push((name.to_owned(), BlockShape::Vector(len), prior));
        self
    }

    pub fn likelihood(mut self, likelihood: impl Likelihood + 'static) -> Self {
        self.likelihood = Some(Box::new(likelihood));
        self
    }

    pub fn build(self) -> Result<ModelGraph, ModelError> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        for (name, shape, prior) in self.blocks {
            if blocks.iter().any(|b: &ParamBlock| b.name == name) {
                return Err(ModelError::DuplicateBlock(name));
            }
            if prior.dim() > 1 && prior.dim() != shape.len() {
                return Err(ModelError::BlockSize {
                    name,
                    expected: shape.len(),
                    got: prior.dim(),
                });
            }
            let transform = distributions::transform_for(prior.support())?;
            blocks.push(ParamBlock {
                name,
                shape,
                prior,
                transform,
                offset,
            });
            offset += shape.len();
        }
        Ok(ModelGraph {
            blocks,
            likelihood: self.likelihood,
            dim: offset,
        })
    }
}

impl ModelGraph {
    pub fn builder() -> ModelBuilder {
        ModelBuilder::default()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Length `D` of the unconstrained vector.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of data points `N`; zero for a prior-only model.
    pub fn data_len(&self) -> usize {
        self.likelihood.as_ref().map_or(0, |l| l.data_len())
    }

    pub fn full_batch(&self) -> Vec<usize> {
        (0..self.data_len()).collect()
    }

    /// Element-level names in unconstrained-vector order.
    pub fn element_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(ParamBlock::element_names).collect()
    }

    /// The zero vector: every block at its transform's image of 0.
    pub fn init_point(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn check_dim(&self, got: usize) -> Result<(), ModelError> {
        if got != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Taped log joint at `zeta` using the rows in `batch`:
    /// `Σ_b [log p_b(θ_b) + log|J_b|] + (N/|batch|) · log L(batch)`.
    pub fn log_joint<'t>(&self, zeta: Var<'t>, batch: &[usize]) -> Result<Var<'t>, ModelError> {
        let tape = zeta.tape();
        self.check_dim(zeta.shape().len())?;
        let mut total: Option<Var<'t>> = None;
        let mut params = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let z = match b.shape {
                BlockShape::Scalar => zeta.at(b.offset)?,
                BlockShape::Vector(n) => zeta.slice(b.offset, n)?,
            };
            let (theta, log_j) = b.transform.inverse_taped(z)?;
            let term = b.prior.log_pdf_taped(theta)?.add(log_j)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
            params.push((b.name.clone(), theta));
        }
        let mut total = total.unwrap_or_else(|| tape.constant(0.0));
        if let Some(lik) = &self.likelihood {
            let n = lik.data_len();
            if batch.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
                return Err(ModelError::BatchIndex { index: bad, len: n });
            }
            let ll = lik.log_likelihood(&Params { values: params }, batch, tape)?;
            let ll = if batch.len() == n {
                ll
            } else {
                ll.scale(n as f64 / batch.len() as f64)?
            };
            total = total.add(ll)?;
        }
        Ok(total)
    }

    /// Log joint and its gradient with respect to `zeta`.
    pub fn value_and_grad(&self, zeta: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_dim(zeta.len())?;
        let tape = Tape::new();
        let z = tape.var(zeta.to_vec());
        let lp = self.log_joint(z, batch)?;
        let value = lp.scalar();
        if !value.is_finite() {
            return Ok((value, vec![f64::NAN; self.dim]));
        }
        let grad = tape.backward(lp)?.wrt(z).into_data();
        Ok((value, grad))
    }

    /// Log joint on the full dataset.
    pub fn log_joint_value(&self, zeta: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(zeta.len())?;
        let tape = Tape::new();
        let z = tape.constant(zeta.to_vec());
        Ok(self.log_joint(z, &self.full_batch())?.scalar())
    }

    /// Maps named constrained values to the unconstrained vector.
    pub fn flatten(&self, values: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>, ModelError> {
        self.check_names(values.keys())?;
        let mut zeta = vec![0.0; self.dim];
        for b in &self.blocks {
            let v = &values[&b.name];
            if v.len() != b.size() {
                return Err(ModelError::BlockSize {
                    name: b.name.clone(),
                    expected: b.size(),
                    got: v.len(),
                });
            }
            for (k, &x) in v.iter().enumerate() {
                let z = b.transform.forward(x);
                if !z.is_finite() {
                    return Err(ModelError::OutOfSupport {
                        name: b.name.clone(),
                        value: x,
                    });
                }
                zeta[b.offset + k] = z;
            }
        }
        Ok(zeta)
    }

    /// Maps the unconstrained vector to named constrained values.
    pub fn unflatten(&self, zeta: &[f64]) -> Result<BTreeMap<String, Vec<f64>>, ModelError> {
        self.check_dim(zeta.len())?;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let v = zeta[b.offset..b.offset + b.size()]
                    .iter()
                    .map(|&z| b.transform.inverse(z))
                    .collect();
                (b.name.clone(), v)
            })
            .collect())
    }

    /// Constrained values in unconstrained-vector order.
    pub fn constrain(&self, zeta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            out.extend(
                zeta[b.offset..b.offset + b.size()]
                    .iter()
                    .map(|&z| b.transform.inverse(z)),
            );
        }
        out
    }

    fn check_names<'a>(&self, names: impl Iterator<Item = &'a String>) -> Result<(), ModelError> {
        let given: Vec<&String> = names.collect();
        let missing: Vec<String> = self
            .blocks
            .iter()
            .filter(|b| !given.contains(&&b.name))
            .map(|b| b.name.clone())
            .collect();
        let extra: Vec<String> = given
            .iter()
            .filter(|n| self.block(n).is_none())
            .map(|n| (*n).clone())
            .collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(ModelError::BlockNames { missing, extra })
        }
    }
}

impl LogDensity for ModelGraph {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        match self.value_and_grad(position, &self.full_batch()) {
            Ok((v, g)) => {
                grad.copy_from_slice(&g);
                if g.iter().all(|x| x.is_finite()) {
                    v
                } else {
                    f64::NAN
                }
            }
            Err(_) => f64::NAN,
        }
    }
}

/// Observations `y_i ~ Normal(μ, σ)` with `σ` known and `μ` the scalar block
/// named `mean_block`.
#[derive(Debug, Clone)]
pub struct IidNormalLikelihood {
    y: Vec<f64>,
    sigma: f64,
    mean_block: String,
}

impl IidNormalLikelihood {
    pub fn new(y: Vec<f64>, sigma: f64, mean_block: &str) -> Result<Self, ModelError> {
        if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidData("observations must be finite and non-empty".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ModelError::InvalidData(format!("noise sd must be positive, got {sigma}")));
        }
        Ok(Self {
            y,
            sigma,
            mean_block: mean_block.to_owned(),
        })
    }
}

impl Likelihood for IidNormalLikelihood {
    fn data_len(&self) -> usize {
        self.y.len()
    }

    fn log_likelihood<'t>(
        &self,
        params: &Params<'t>,
        batch: &[usize],
        tape: &'t Tape,
    ) -> Result<Var<'t>, AdError> {
        let mu = params.get(&self.mean_block);
        let y = tape.constant(batch.iter().map(|&i| self.y[i]).collect::<Vec<_>>());
        let n = batch.len() as f64;
        y.sub(mu)?
            .scale(1.0 / self.sigma)?
            .square()?
            .sum()?
            .scale(-0.5)?
            .shift(-n * (self.sigma.ln() + distributions::HALF_LN_2PI))
    }
}
