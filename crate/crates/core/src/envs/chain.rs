//! Tabular chain MDP with exact policy evaluation. All oracle math stays in
//! f64; the rollout wrapper converts observations to the pipeline scalar.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Finite MDP: transition tensor P[s][a][s'], rewards R[s][a] in (0, 1].
#[derive(Clone, Debug)]
pub struct ChainMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// [s * n_actions * n_states + a * n_states + s']
    pub transitions: Vec<f64>,
    /// [s * n_actions + a]
    pub rewards: Vec<f64>,
    pub gamma: f64,
    /// None = discounted infinite horizon; Some(h) = episodic rollouts.
    pub horizon: Option<usize>,
}

impl ChainMdp {
    /// Default 6-state, 2-action chain: action 0 drifts left, action 1 right,
    /// rewards increase with the state index.
    pub fn default_chain() -> Self {
        let (n_states, n_actions) = (6, 2);
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        let mut rewards = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            for a in 0..n_actions {
                let target = if a == 0 { s.saturating_sub(1) } else { (s + 1).min(n_states - 1) };
                // 0.8 to the intended neighbour, 0.2 stay
                transitions[s * n_actions * n_states + a * n_states + target] += 0.8;
                transitions[s * n_actions * n_states + a * n_states + s] += 0.2;
                rewards[s * n_actions + a] = 0.1 + 0.9 * (s as f64 / (n_states - 1) as f64) * 0.9
                    + if a == 1 { 0.05 } else { 0.0 };
            }
        }
        ChainMdp { n_states, n_actions, transitions, rewards, gamma: 0.99, horizon: Some(40) }
    }

    /// Random instance with valid stochastic rows and rewards in (0, 1].
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        let mut rewards = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(1e-3..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= sum;
                }
                let off = s * n_actions * n_states + a * n_states;
                transitions[off..off + n_states].copy_from_slice(&row);
                rewards[s * n_actions + a] = rng.gen_range(1e-3..1.0);
            }
        }
        ChainMdp { n_states, n_actions, transitions, rewards, gamma, horizon: None }
    }

    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transitions[s * self.n_actions * self.n_states + a * self.n_states + s_next]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = (0..self.n_states).map(|sn| self.p(s, a, sn)).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("transition row ({s},{a}) sums to {sum}")));
                }
                let r = self.r(s, a);
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::Domain(format!("reward ({s},{a}) = {r} outside (0,1]")));
                }
            }
        }
        Ok(())
    }
}

/// Tabular stochastic policy: pi[s][a].
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            let mut row: Vec<f64> = (0..n_actions).map(|_| rng.gen_range(1e-3..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            probs[s * n_actions..(s + 1) * n_actions].copy_from_slice(&row);
        }
        TabularPolicy { n_states, n_actions, probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

/// Exact policy evaluation: solves V = R_pi + gamma * P_pi V directly.
/// The Bellman residual of the returned V is at most 1e-10.
pub fn dp_value(mdp: &ChainMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    if mdp.horizon.is_none() && mdp.gamma >= 1.0 {
        return Err(Error::Domain("gamma must be < 1 for infinite-horizon evaluation".into()));
    }
    mdp.validate()?;
    let n = mdp.n_states;
    let mut r_pi = vec![0.0; n];
    let mut p_pi = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = policy.prob(s, a);
            r_pi[s] += pa * mdp.r(s, a);
            for sn in 0..n {
                p_pi[s * n + sn] += pa * mdp.p(s, a, sn);
            }
        }
    }
    // (I - gamma P_pi) V = R_pi
    let mut m = vec![0.0; n * n];
    for s in 0..n {
        for sn in 0..n {
            m[s * n + sn] = if s == sn { 1.0 } else { 0.0 } - mdp.gamma * p_pi[s * n + sn];
        }
    }
    let v = linalg::solve(&m, &r_pi, n)?;
    let res = linalg::residual(&m, &v, &r_pi, n);
    if res > 1e-10 {
        return Err(Error::Verification(format!("policy evaluation residual {res} > 1e-10")));
    }
    Ok(v)
}

/// Q^pi(s,a) = R(s,a) + gamma * sum_s' P(s,a,s') V^pi(s').
pub fn dp_q_values(mdp: &ChainMdp, v: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut acc = mdp.r(s, a);
            for sn in 0..mdp.n_states {
                acc += mdp.gamma * mdp.p(s, a, sn) * v[sn];
            }
            q[s * mdp.n_actions + a] = acc;
        }
    }
    q
}

/// Discounted state occupancy d(s') = sum_t gamma^t P(s_t = s' | rho0, pi),
/// solved exactly from (I - gamma P_pi^T) d = rho0.
pub fn occupancy(mdp: &ChainMdp, policy: &TabularPolicy, rho0: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states;
    let mut p_pi_t = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = policy.prob(s, a);
            for sn in 0..n {
                p_pi_t[sn * n + s] += pa * mdp.p(s, a, sn);
            }
        }
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = if i == j { 1.0 } else { 0.0 } - mdp.gamma * p_pi_t[i * n + j];
        }
    }
    linalg::solve(&m, rho0, n)
}

/// Rollout wrapper: observations are one-hot state indicators.
#[derive(Clone)]
pub struct ChainMdpEnv<F: Scalar> {
    mdp: ChainMdp,
    state: usize,
    steps: usize,
    rng: ChaCha8Rng,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> ChainMdpEnv<F> {
    pub fn new(mdp: ChainMdp) -> Self {
        ChainMdpEnv {
            mdp,
            state: 0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn mdp(&self) -> &ChainMdp {
        &self.mdp
    }

    fn observe(&self) -> Vec<F> {
        let mut obs = vec![F::zero(); self.mdp.n_states];
        obs[self.state] = F::one();
        obs
    }
}

impl<F: Scalar> Environment<F> for ChainMdpEnv<F> {
    fn id(&self) -> &str {
        "chain"
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon.unwrap_or(40)
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        None
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn reset(&mut self, seed: u64) -> Vec<F> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.rng.gen_range(0..self.mdp.n_states);
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: usize) -> StepOutcome<F> {
        let a = action.min(self.mdp.n_actions - 1);
        let reward = self.mdp.r(self.state, a);
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut next = self.mdp.n_states - 1;
        for sn in 0..self.mdp.n_states {
            acc += self.mdp.p(self.state, a, sn);
            if u < acc {
                next = sn;
                break;
            }
        }
        self.state = next;
        self.steps += 1;
        StepOutcome {
            obs: self.observe(),
            reward: F::from_f64_c(reward),
            done: self.steps >= self.horizon(),
        }
    }
}
