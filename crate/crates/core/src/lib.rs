//! Bayesian regression with automatic differentiation.
//!
//! Models are assembled as a [`model::ModelGraph`] of priors and a likelihood,
//! then fitted either by mean-field ADVI ([`advi`]) or by NUTS ([`nuts`]).
//! [`models`] ships linear and Gaussian-process regressors on top of that,
//! and [`diagnostics`] summarizes and exports the fitted posteriors.

pub mod autodiff;
pub mod linalg;
pub mod rng;
pub mod distributions;
pub mod model;
pub mod advi;
pub mod nuts;
pub mod diagnostics;
pub mod models;
