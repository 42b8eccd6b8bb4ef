//! Sequence-model generation of L2-budgeted observation perturbations
//! against reinforcement-learning policies, plus the exact tabular oracles
//! that verify the underlying value-theory identities.
//!
//! The pipeline has three stages: value estimation over an offline attack
//! dataset (expectile-regressed Q/V heads and a bounded advantage signal),
//! autoregressive training of a multi-scale-attention decoder over trajectory
//! tokens, and an online attack loop that emits one budget-projected
//! perturbation per environment step.
//!
//! All numeric code is generic over [`scalar::Scalar`]; use the `f32` lane
//! for training speed and the `f64` lane for gradient checks and oracles.

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod policy;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete scalar lanes. Training defaults to [`Fast`]; verification
/// and oracle code uses [`Exact`].
pub type Fast = f32;
pub type Exact = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
