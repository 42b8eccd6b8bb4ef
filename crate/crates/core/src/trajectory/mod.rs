//! Trajectory records, the log-base-1/2 returns-to-go transform, patch
//! tokenization, JSON-Lines dataset serialization, and offline collectors.

mod collect;
mod serde_io;

pub use collect::{collect, collect_mixed, Collector};
pub use serde_io::{deserialize_dataset, serialize_dataset, SCHEMA_VERSION};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reward floor applied before the log transform; log_{1/2} diverges at 0.
pub const REWARD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum ActionValue<F: Scalar> {
    Discrete(usize),
    Continuous(Vec<F>),
}

/// One timestep of an attack trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord<F: Scalar> {
    pub t: usize,
    pub state: Vec<F>,
    pub action: ActionValue<F>,
    pub delta: Vec<F>,
    pub reward: F,
    pub returns_to_go: F,
    pub weighted_advantage: Option<F>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory<F: Scalar> {
    pub records: Vec<TrajectoryRecord<F>>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RewardBounds {
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub env_id: String,
    /// collector name -> fraction of episodes; fractions sum to 1.
    pub collector_mix: BTreeMap<String, f64>,
    pub episode_count: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub reward_normalization: RewardBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.collector_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("collector fractions sum to {total}, expected 1")));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Data("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F: Scalar> {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn record_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.records.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord<F>> {
        self.trajectories.iter().flat_map(|t| t.records.iter())
    }
}

/// Affine reward normalization onto (0, 1], clamped to [1e-3, 1].
pub fn normalize_reward<F: Scalar>(r_raw: F, r_min: F, r_max: F) -> Result<F> {
    if r_max <= r_min {
        return Err(Error::Config(format!(
            "reward bounds must satisfy r_max > r_min (got {r_min}, {r_max})"
        )));
    }
    let scaled = (r_raw - r_min) / (r_max - r_min);
    let floor = F::from_f64_c(REWARD_FLOOR);
    Ok(scaled.max(floor).min(F::one()))
}

/// Sum of log_{1/2} rewards from step `from_t` to the end. Non-negative,
/// larger when the victim earns less.
pub fn returns_to_go<F: Scalar>(rewards: &[F], from_t: usize) -> Result<F> {
    if from_t >= rewards.len() {
        return Err(Error::Domain(format!(
            "from_t {} out of range for {} rewards",
            from_t,
            rewards.len()
        )));
    }
    let mut acc = F::zero();
    for &r in &rewards[from_t..] {
        if !(r > F::zero() && r <= F::one()) {
            return Err(Error::Domain(format!("reward {r} outside (0, 1]")));
        }
        acc += log_half(r);
    }
    Ok(acc)
}

/// log_{1/2}(r) = -log2(r).
pub fn log_half<F: Scalar>(r: F) -> F {
    -r.log2()
}

/// Returns-to-go for every step at once.
pub fn returns_to_go_all<F: Scalar>(rewards: &[F]) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); rewards.len()];
    let mut acc = F::zero();
    for t in (0..rewards.len()).rev() {
        let r = rewards[t];
        if !(r > F::zero() && r <= F::one()) {
            return Err(Error::Domain(format!("reward {r} outside (0, 1]")));
        }
        acc += log_half(r);
        out[t] = acc;
    }
    Ok(out)
}

/// Non-overlapping patch decomposition of a (possibly multi-channel) image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<F: Scalar> {
    pub patch_side: usize,
    pub channels: usize,
    /// Patches per image row / column.
    pub grid_h: usize,
    pub grid_w: usize,
    /// [X x patch_side^2 * channels], row-major patch order.
    pub patches: Tensor<F>,
}

impl<F: Scalar> PatchGrid<F> {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Geometry of patch tokenization, carried by models that consume images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_side: usize,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, channels: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 || height % patch_side != 0 || width % patch_side != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} not divisible by patch side {patch_side}"
            )));
        }
        Ok(PatchLayout { height, width, channels, patch_side })
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_side) * (self.width / self.patch_side)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn obs_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Permutation taking a patch-major flat vector back to pixel-major:
    /// pixel_index -> patch_major_index.
    pub fn unpatchify_permutation(&self) -> Vec<usize> {
        let side = self.patch_side;
        let gw = self.width / side;
        let mut perm = vec![0usize; self.obs_dim()];
        for (pixel_idx, slot) in perm.iter_mut().enumerate() {
            let c = pixel_idx % self.channels;
            let xy = pixel_idx / self.channels;
            let y = xy / self.width;
            let x = xy % self.width;
            let (py, px) = (y / side, x / side);
            let (iy, ix) = (y % side, x % side);
            let patch = py * gw + px;
            *slot = patch * self.patch_dim() + (iy * side + ix) * self.channels + c;
        }
        perm
    }
}

/// Split an image (pixel-major, channels innermost) into non-overlapping
/// patches in row-major patch order. Lossless.
pub fn patchify<F: Scalar>(image: &[F], layout: &PatchLayout) -> Result<PatchGrid<F>> {
    if image.len() != layout.obs_dim() {
        return Err(Error::Shape(format!(
            "image length {} does not match layout {}x{}x{}",
            image.len(),
            layout.height,
            layout.width,
            layout.channels
        )));
    }
    let side = layout.patch_side;
    let (gh, gw) = (layout.height / side, layout.width / side);
    let mut patches = Tensor::zeros(gh * gw, layout.patch_dim());
    for py in 0..gh {
        for px in 0..gw {
            let patch = py * gw + px;
            for iy in 0..side {
                for ix in 0..side {
                    for c in 0..layout.channels {
                        let y = py * side + iy;
                        let x = px * side + ix;
                        let src = (y * layout.width + x) * layout.channels + c;
                        let dst = (iy * side + ix) * layout.channels + c;
                        patches.data[patch * layout.patch_dim() + dst] = image[src];
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patch_side: side, channels: layout.channels, grid_h: gh, grid_w: gw, patches })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(grid: &PatchGrid<F>, layout: &PatchLayout) -> Result<Vec<F>> {
    if grid.num_patches() != layout.num_patches() || grid.patches.cols != layout.patch_dim() {
        return Err(Error::Shape("patch grid does not match layout".into()));
    }
    let mut image = vec![F::zero(); layout.obs_dim()];
    let perm = layout.unpatchify_permutation();
    let flat = &grid.patches.data;
    for (pixel_idx, &patch_idx) in perm.iter().enumerate() {
        image[pixel_idx] = flat[patch_idx];
    }
    Ok(image)
}

/// Which scalar conditions the decoder at each step.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    ReturnsToGo,
    WeightedAdvantage,
    /// Raw advantage, recovered from the stored weighted value by inverting
    /// the bounding map with the given lambda.
    OrdinaryAdvantage { lambda: f64 },
}

impl ConditionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionKind::ReturnsToGo => "returns_to_go",
            ConditionKind::WeightedAdvantage => "weighted_advantage",
            ConditionKind::OrdinaryAdvantage { .. } => "ordinary_advantage",
        }
    }
}

/// Tokens of the interleaved decoder stream, in per-step order
/// [condition, patch_1..patch_X, perturbation, action].
#[derive(Clone, Debug)]
pub enum Token<F: Scalar> {
    Condition(F),
    Patch(Vec<F>),
    Perturbation(Vec<F>),
    Action(ActionValue<F>),
}

#[derive(Clone, Debug)]
pub struct TokenSequence<F: Scalar> {
    pub tokens: Vec<Token<F>>,
    pub steps: usize,
    pub patches_per_step: usize,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn tokens_per_step(&self) -> usize {
        self.patches_per_step + 3
    }
}

/// Invert the bounded advantage map: a = w / (1 - lambda * |w|).
pub fn invert_weighted_advantage<F: Scalar>(w: F, lambda: F) -> F {
    let denom = F::one() - lambda * w.abs();
    w / denom
}

/// Interleave contiguous records into the decoder token stream. The total
/// token count is steps * (patches + 3).
pub fn build_token_sequence<F: Scalar>(
    records: &[TrajectoryRecord<F>],
    condition: ConditionKind,
    patch_layout: Option<&PatchLayout>,
) -> Result<TokenSequence<F>> {
    if records.is_empty() {
        return Err(Error::Data("cannot tokenize an empty record list".into()));
    }
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].t != pair[0].t + 1 {
            return Err(Error::Data(format!(
                "records not contiguous at index {i}: t {} then {}",
                pair[0].t, pair[1].t
            )));
        }
    }
    let patches_per_step = patch_layout.map(PatchLayout::num_patches).unwrap_or(1);
    let mut tokens = Vec::with_capacity(records.len() * (patches_per_step + 3));
    for rec in records {
        let cond = match condition {
            ConditionKind::ReturnsToGo => rec.returns_to_go,
            ConditionKind::WeightedAdvantage => rec.weighted_advantage.ok_or_else(|| {
                Error::Data(format!("record t={} has no weighted advantage", rec.t))
            })?,
            ConditionKind::OrdinaryAdvantage { lambda } => {
                let w = rec.weighted_advantage.ok_or_else(|| {
                    Error::Data(format!("record t={} has no weighted advantage", rec.t))
                })?;
                invert_weighted_advantage(w, F::from_f64_c(lambda))
            }
        };
        tokens.push(Token::Condition(cond));
        match patch_layout {
            Some(layout) => {
                let grid = patchify(&rec.state, layout)?;
                for p in 0..grid.num_patches() {
                    tokens.push(Token::Patch(grid.patches.row(p).to_vec()));
                }
            }
            None => tokens.push(Token::Patch(rec.state.clone())),
        }
        tokens.push(Token::Perturbation(rec.delta.clone()));
        tokens.push(Token::Action(rec.action.clone()));
    }
    Ok(TokenSequence { tokens, steps: records.len(), patches_per_step })
}

#[cfg(test)]
mod tests;
