//! Laboratory for single-teacher, average-ensemble, confidence-weighted and
//! stochastic multi-teacher knowledge distillation on small dense networks.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit instantiations used by the experiment harness.

// Negated comparisons double as NaN rejection in validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod kd;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp64 = nn::Mlp<f64>;
pub type GradientTape64 = nn::GradientTape<f64>;
pub type Logits = kd::LogitVector<f64>;
pub type Probs = kd::ProbVector<f64>;
pub type KdConfig64 = kd::KdConfig<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type TeacherTeam64 = sampling::TeacherTeam<f64>;
pub type SamplingDistribution64 = sampling::SamplingDistribution<f64>;
pub type SgdConfig64 = optim::SgdConfig<f64>;
pub type AdamConfig64 = optim::AdamConfig<f64>;
pub type OptimizerConfig64 = optim::OptimizerConfig<f64>;
pub type OptimizerState64 = optim::OptimizerState<f64>;
pub type GradientLedger64 = convergence::GradientLedger<f64>;
