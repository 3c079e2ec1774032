//! Risk-profiled safety-critic DDPG ensemble for portfolio management.
//!
//! The pipeline per trading day: every agent proposes an action, the
//! meta-adaptive controller weights the proposals, the weighted action passes
//! through the compliance overlay and the environment executes it.
//!
//! Numeric kernels ([`nn`], indicator and metric functions) are generic over
//! [`Scalar`] (`f32` or `f64`); the training system runs in `f64` through the
//! aliases below.

pub mod agent;
pub mod backtest;
pub mod config;
pub mod data;
pub mod env;
pub mod manifest;
pub mod meta;
pub mod nn;
pub mod risk;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod train;

pub use scalar::Scalar;

/// Scalar type used by the environment and training loop.
pub type Real = f64;
/// Multi-layer perceptron in the working precision.
pub type Mlp = nn::Network<Real>;
pub type MlpGradients = nn::Gradients<Real>;
pub type MlpOptState = nn::OptState<Real>;
