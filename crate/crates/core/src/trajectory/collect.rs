//! Offline dataset collectors: random-direction noise and inverse-gradient
//! (sign-step) perturbations, both projected onto the L2 budget ball.
//! Episodes run in parallel workers with derived seeds; assembly is a
//! single-writer merge in episode order.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    normalize_reward, returns_to_go_all, ActionValue, Dataset, DatasetManifest, RewardBounds,
    Trajectory, TrajectoryRecord, SCHEMA_VERSION,
};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::policy::PolicyHandle;
use crate::scalar::Scalar;
use crate::tensor::{l2_norm, project_l2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collector {
    Random,
    Fgsm,
}

impl Collector {
    pub fn name(&self) -> &'static str {
        match self {
            Collector::Random => "random",
            Collector::Fgsm => "fgsm",
        }
    }
}

impl std::str::FromStr for Collector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Collector::Random),
            "fgsm" => Ok(Collector::Fgsm),
            other => Err(Error::Config(format!("unknown collector '{other}'"))),
        }
    }
}

fn random_delta<F: Scalar>(dim: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    // uniform direction, radius scaled to <= epsilon
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = epsilon * rng.gen::<f64>();
    if norm > 0.0 {
        for v in &mut dir {
            *v *= radius / norm;
        }
    }
    dir.into_iter().map(F::from_f64_c).collect()
}

fn fgsm_delta<F: Scalar>(
    policy: &PolicyHandle<F>,
    obs: &[F],
    epsilon: f64,
) -> Result<Vec<F>> {
    let clean_action = policy.act(obs);
    let grad = policy.input_gradient(obs, clean_action)?;
    // sign step, then projection onto the L2 ball
    let mut delta: Vec<F> = grad
        .iter()
        .map(|&g| {
            if g > F::zero() {
                F::one()
            } else if g < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    let eps = F::from_f64_c(epsilon);
    project_l2(&mut delta, eps);
    Ok(delta)
}

fn run_episode<F: Scalar, E: Environment<F>>(
    env: &mut E,
    policy: &PolicyHandle<F>,
    collector: Collector,
    epsilon: f64,
    episode_seed: u64,
) -> Result<Trajectory<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let env_seed: u64 = rng.gen();
    let (r_min, r_max) = env.reward_bounds();
    let mut obs = env.reset(env_seed);
    let eps_bound = F::from_f64_c(epsilon + 1e-9);

    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut deltas = Vec::new();
    let mut rewards = Vec::new();
    loop {
        let delta = match collector {
            Collector::Random => random_delta(obs.len(), epsilon, &mut rng),
            Collector::Fgsm => fgsm_delta(policy, &obs, epsilon)?,
        };
        debug_assert!(l2_norm(&delta) <= eps_bound);
        let perturbed: Vec<F> = obs.iter().zip(&delta).map(|(s, d)| *s + *d).collect();
        let action = policy.act(&perturbed);
        let out = env.step(action);
        states.push(obs);
        actions.push(action);
        deltas.push(delta);
        rewards.push(normalize_reward(out.reward, F::from_f64_c(r_min), F::from_f64_c(r_max))?);
        obs = out.obs;
        if out.done {
            break;
        }
    }
    let rtg = returns_to_go_all(&rewards)?;
    let records = (0..states.len())
        .map(|t| TrajectoryRecord {
            t,
            state: std::mem::take(&mut states[t]),
            action: ActionValue::Discrete(actions[t]),
            delta: std::mem::take(&mut deltas[t]),
            reward: rewards[t],
            returns_to_go: rtg[t],
            weighted_advantage: None,
        })
        .collect();
    Ok(Trajectory { records })
}

/// Collect `episodes` episodes with a single collector.
pub fn collect<F: Scalar, E: Environment<F> + Clone + Sync>(
    env: &E,
    policy: &PolicyHandle<F>,
    collector: Collector,
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if epsilon < 0.0 {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    if episodes == 0 {
        return Err(Error::Data("episode count must be positive".into()));
    }
    let trajectories: Vec<Result<Trajectory<F>>> = (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let mut worker_env = env.clone();
            let episode_seed = derive_seed(seed, collector, ep);
            run_episode(&mut worker_env, policy, collector, epsilon, episode_seed)
        })
        .collect();
    let trajectories: Result<Vec<_>> = trajectories.into_iter().collect();
    let trajectories = trajectories?;

    let (r_min, r_max) = env.reward_bounds();
    let mut mix = BTreeMap::new();
    mix.insert(collector.name().to_string(), 1.0);
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            env_id: env.id().to_string(),
            collector_mix: mix,
            episode_count: episodes,
            epsilon,
            seed,
            reward_normalization: RewardBounds { r_min, r_max },
            config_hash: None,
        },
        trajectories,
    })
}

/// Collect with a mix of collectors; episode counts follow the fractions.
pub fn collect_mixed<F: Scalar, E: Environment<F> + Clone + Sync>(
    env: &E,
    policy: &PolicyHandle<F>,
    mix: &[(Collector, f64)],
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    let total: f64 = mix.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("collector fractions sum to {total}, expected 1")));
    }
    let mut combined: Option<Dataset<F>> = None;
    let mut mix_map = BTreeMap::new();
    let mut assigned = 0usize;
    for (i, (collector, fraction)) in mix.iter().enumerate() {
        let count = if i + 1 == mix.len() {
            episodes - assigned
        } else {
            ((episodes as f64) * fraction).round() as usize
        };
        assigned += count;
        mix_map.insert(collector.name().to_string(), *fraction);
        if count == 0 {
            continue;
        }
        let part = collect(env, policy, *collector, count, epsilon, seed)?;
        match &mut combined {
            None => combined = Some(part),
            Some(d) => d.trajectories.extend(part.trajectories),
        }
    }
    let mut dataset = combined.ok_or_else(|| Error::Data("empty collector mix".into()))?;
    dataset.manifest.collector_mix = mix_map;
    dataset.manifest.episode_count = episodes;
    Ok(dataset)
}

pub(crate) fn derive_seed(base: u64, collector: Collector, episode: usize) -> u64 {
    let tag = match collector {
        Collector::Random => 0x52_41_4e_44u64,
        Collector::Fgsm => 0x46_47_53_4du64,
    };
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_add((episode as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}
