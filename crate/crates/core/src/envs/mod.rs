//! Built-in, dependency-free desk environments and target policies: a
//! tabular chain MDP for exact oracles and a pixel-observation grid world
//! for end-to-end attacks.

mod chain;
mod grid;
mod train;

pub use chain::{ChainMdp, ChainMdpEnv};
pub use grid::{GridLayout, GridPixels};
pub use train::{train_toy_policy, PolicyTrainConfig, PolicyTrainReport};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One environment step.
pub struct StepOutcome<F: Scalar> {
    pub obs: Vec<F>,
    pub reward: F,
    pub done: bool,
}

/// Episodic environment with float observations. Rewards are already in
/// (0, 1], which keeps the log-return transform free of normalization
/// edge cases.
pub trait Environment<F: Scalar>: Send {
    fn id(&self) -> &str;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    /// (height, width) when observations are grayscale images.
    fn image_shape(&self) -> Option<(usize, usize)>;
    /// Raw reward bounds, for the dataset manifest.
    fn reward_bounds(&self) -> (f64, f64);
    fn reset(&mut self, seed: u64) -> Vec<F>;
    fn step(&mut self, action: usize) -> StepOutcome<F>;
}

/// Environment registry keyed by string id.
#[derive(Clone)]
pub enum DeskEnv<F: Scalar> {
    Grid(GridPixels<F>),
    Chain(ChainMdpEnv<F>),
}

impl<F: Scalar> DeskEnv<F> {
    pub fn from_id(id: &str, grid_layout: Option<GridLayout>) -> Result<Self> {
        match id {
            "grid" => Ok(DeskEnv::Grid(GridPixels::new(grid_layout.unwrap_or_default()))),
            "chain" => Ok(DeskEnv::Chain(ChainMdpEnv::new(ChainMdp::default_chain()))),
            other => Err(Error::Config(format!("unknown environment id '{other}'"))),
        }
    }
}

impl<F: Scalar> Environment<F> for DeskEnv<F> {
    fn id(&self) -> &str {
        match self {
            DeskEnv::Grid(e) => e.id(),
            DeskEnv::Chain(e) => e.id(),
        }
    }

    fn obs_dim(&self) -> usize {
        match self {
            DeskEnv::Grid(e) => e.obs_dim(),
            DeskEnv::Chain(e) => e.obs_dim(),
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            DeskEnv::Grid(e) => e.n_actions(),
            DeskEnv::Chain(e) => e.n_actions(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            DeskEnv::Grid(e) => e.horizon(),
            DeskEnv::Chain(e) => e.horizon(),
        }
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            DeskEnv::Grid(e) => e.image_shape(),
            DeskEnv::Chain(e) => e.image_shape(),
        }
    }

    fn reward_bounds(&self) -> (f64, f64) {
        match self {
            DeskEnv::Grid(e) => e.reward_bounds(),
            DeskEnv::Chain(e) => e.reward_bounds(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<F> {
        match self {
            DeskEnv::Grid(e) => e.reset(seed),
            DeskEnv::Chain(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: usize) -> StepOutcome<F> {
        match self {
            DeskEnv::Grid(e) => e.step(action),
            DeskEnv::Chain(e) => e.step(action),
        }
    }
}
