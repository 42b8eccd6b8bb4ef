//! Target/substitute policies and the access-mode wrapper that separates
//! white-box (gradient-queryable) from black-box (action-query only) use.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{linear, Tape, VarId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trajectory::ActionValue;

/// Read-only view of a policy: enough to run rollouts.
pub trait Policy<F: Scalar>: Send + Sync {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn logits(&self, obs: &[F]) -> Vec<F>;

    fn action_probs(&self, obs: &[F]) -> Vec<F> {
        softmax(&self.logits(obs))
    }

    /// Greedy action.
    fn act(&self, obs: &[F]) -> usize {
        argmax(&self.logits(obs))
    }
}

/// A policy whose action vector is differentiable through the tape.
pub trait DifferentiablePolicy<F: Scalar>: Policy<F> {
    /// Action vector rows for a batch of observations: probability vectors
    /// for discrete policies, raw action vectors for continuous ones.
    fn action_vector_on_tape(&self, tape: &mut Tape<F>, obs: VarId) -> VarId;

    /// The vector an emitted action compares against in a squared-error
    /// action loss (one-hot for discrete, identity for continuous).
    fn target_vector(&self, action: &ActionValue<F>) -> Vec<F>;

    /// d/d_obs of the cross-entropy between the policy output at `obs` and
    /// `label` (the inverse-gradient collector's loss).
    fn input_gradient(&self, obs: &[F], label: usize) -> Vec<F>;
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Two affine layers with a ReLU between, pixels -> action scores. The same
/// network serves as a Q-function (greedy argmax) or a softmax policy head,
/// depending on the training algorithm tag.
#[derive(Clone, Debug)]
pub struct ToyPolicy<F: Scalar> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
    pub algorithm: TrainAlgorithm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainAlgorithm {
    QLearning,
    PolicyGradient,
}

impl<F: Scalar> ToyPolicy<F> {
    pub const HIDDEN: usize = 64;

    pub fn init(obs_dim: usize, n_actions: usize, algorithm: TrainAlgorithm, rng: &mut ChaCha8Rng) -> Self {
        ToyPolicy {
            w1: Tensor::xavier(obs_dim, Self::HIDDEN, rng),
            b1: Tensor::zeros(1, Self::HIDDEN),
            w2: Tensor::xavier(Self::HIDDEN, n_actions, rng),
            b2: Tensor::zeros(1, n_actions),
            algorithm,
        }
    }

    pub fn param_list_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }

    pub fn param_list(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    /// Score rows for a batch with the weights registered as constants.
    pub fn logits_on_tape(&self, tape: &mut Tape<F>, obs: VarId) -> VarId {
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let h = linear(tape, obs, w1, b1);
        let a = tape.relu(h);
        linear(tape, a, w2, b2)
    }

    /// Same forward with the weights as trainable params; returns the logits
    /// var plus the param vars in `param_list` order.
    pub fn logits_on_tape_trainable(&self, tape: &mut Tape<F>, obs: VarId) -> (VarId, Vec<VarId>) {
        let w1 = tape.param(self.w1.clone());
        let b1 = tape.param(self.b1.clone());
        let w2 = tape.param(self.w2.clone());
        let b2 = tape.param(self.b2.clone());
        let h = linear(tape, obs, w1, b1);
        let a = tape.relu(h);
        let logits = linear(tape, a, w2, b2);
        (logits, vec![w1, b1, w2, b2])
    }
}

impl<F: Scalar> Policy<F> for ToyPolicy<F> {
    fn obs_dim(&self) -> usize {
        self.w1.rows
    }

    fn n_actions(&self) -> usize {
        self.w2.cols
    }

    fn logits(&self, obs: &[F]) -> Vec<F> {
        debug_assert_eq!(obs.len(), self.w1.rows);
        let hidden = self.w1.cols;
        let mut h = vec![F::zero(); hidden];
        for (i, &x) in obs.iter().enumerate() {
            if x == F::zero() {
                continue;
            }
            let row = self.w1.row(i);
            for (hv, wv) in h.iter_mut().zip(row) {
                *hv += x * *wv;
            }
        }
        for (hv, bv) in h.iter_mut().zip(&self.b1.data) {
            *hv += *bv;
            if *hv < F::zero() {
                *hv = F::zero();
            }
        }
        let n_out = self.w2.cols;
        let mut out = self.b2.data.clone();
        for (i, &hv) in h.iter().enumerate() {
            if hv == F::zero() {
                continue;
            }
            let row = self.w2.row(i);
            for c in 0..n_out {
                out[c] += hv * row[c];
            }
        }
        out
    }
}

impl<F: Scalar> DifferentiablePolicy<F> for ToyPolicy<F> {
    fn action_vector_on_tape(&self, tape: &mut Tape<F>, obs: VarId) -> VarId {
        let logits = self.logits_on_tape(tape, obs);
        tape.softmax_rows(logits)
    }

    fn target_vector(&self, action: &ActionValue<F>) -> Vec<F> {
        match action {
            ActionValue::Discrete(a) => {
                let mut v = vec![F::zero(); self.n_actions()];
                v[*a] = F::one();
                v
            }
            ActionValue::Continuous(v) => v.clone(),
        }
    }

    fn input_gradient(&self, obs: &[F], label: usize) -> Vec<F> {
        let mut tape: Tape<F> = Tape::new();
        let o = tape.param(Tensor::row_vec(obs.to_vec()));
        let logits = self.logits_on_tape(&mut tape, o);
        let loss = tape.softmax_cross_entropy(logits, &[label], None);
        let grads = tape.backward(loss);
        grads.get(o).expect("input gradient").data.clone()
    }
}

/// Access mode of a policy handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    WhiteBox,
    BlackBox,
}

/// Counters exposed for the no-leak assertions.
#[derive(Debug, Default)]
pub struct AccessCounters {
    pub action_queries: AtomicU64,
    pub gradient_queries: AtomicU64,
}

/// Capability wall around a policy. Action queries always pass; anything that
/// reads gradients or internals errors out in black-box mode and is counted
/// in white-box mode.
pub struct PolicyHandle<F: Scalar> {
    policy: Arc<ToyPolicy<F>>,
    mode: AccessMode,
    pub counters: AccessCounters,
}

impl<F: Scalar> PolicyHandle<F> {
    pub fn white_box(policy: ToyPolicy<F>) -> Self {
        PolicyHandle { policy: Arc::new(policy), mode: AccessMode::WhiteBox, counters: AccessCounters::default() }
    }

    pub fn black_box(policy: ToyPolicy<F>) -> Self {
        PolicyHandle { policy: Arc::new(policy), mode: AccessMode::BlackBox, counters: AccessCounters::default() }
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.policy.n_actions()
    }

    /// Action query; permitted in every mode.
    pub fn act(&self, obs: &[F]) -> usize {
        self.counters.action_queries.fetch_add(1, Ordering::Relaxed);
        self.policy.act(obs)
    }

    fn guard(&self, what: &str) -> Result<()> {
        match self.mode {
            AccessMode::WhiteBox => {
                self.counters.gradient_queries.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            AccessMode::BlackBox => Err(Error::Capability(format!(
                "{what} requires white-box access to the target policy"
            ))),
        }
    }

    /// Gradient of the collector loss wrt the observation (inverse-gradient
    /// perturbations). Black-box mode refuses.
    pub fn input_gradient(&self, obs: &[F], label: usize) -> Result<Vec<F>> {
        self.guard("input gradient")?;
        Ok(self.policy.input_gradient(obs, label))
    }

    /// Differentiable action vector for training losses. Black-box mode
    /// refuses; train against a substitute handle instead.
    pub fn action_vector_on_tape(&self, tape: &mut Tape<F>, obs: VarId) -> Result<VarId> {
        self.guard("differentiable policy output")?;
        Ok(self.policy.action_vector_on_tape(tape, obs))
    }

    pub fn target_vector(&self, action: &ActionValue<F>) -> Vec<F> {
        self.policy.target_vector(action)
    }

    /// Output width of the action vector (n_actions for discrete policies).
    pub fn action_vector_dim(&self) -> usize {
        self.policy.n_actions()
    }

    pub fn gradient_query_count(&self) -> u64 {
        self.counters.gradient_queries.load(Ordering::Relaxed)
    }

    pub fn action_query_count(&self) -> u64 {
        self.counters.action_queries.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn probabilities_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: ToyPolicy<f64> = ToyPolicy::init(10, 4, TrainAlgorithm::QLearning, &mut rng);
        let obs: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let probs = p.action_probs(&obs);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tape_logits_match_direct_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: ToyPolicy<f64> = ToyPolicy::init(6, 3, TrainAlgorithm::QLearning, &mut rng);
        let obs: Vec<f64> = vec![0.2, -0.4, 0.0, 1.0, 0.5, -0.1];
        let direct = p.logits(&obs);
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::row_vec(obs));
        let l = p.logits_on_tape(&mut tape, o);
        for (a, b) in tape.value(l).data.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn black_box_refuses_gradient_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: ToyPolicy<f64> = ToyPolicy::init(4, 2, TrainAlgorithm::QLearning, &mut rng);
        let handle = PolicyHandle::black_box(p);
        let err = handle.input_gradient(&[0.0; 4], 0);
        assert!(matches!(err, Err(crate::error::Error::Capability(_))));
        assert_eq!(handle.gradient_query_count(), 0);
        // action queries still pass and are counted
        handle.act(&[0.0; 4]);
        assert_eq!(handle.action_query_count(), 1);
    }

    #[test]
    fn white_box_counts_gradient_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: ToyPolicy<f64> = ToyPolicy::init(4, 2, TrainAlgorithm::QLearning, &mut rng);
        let handle = PolicyHandle::white_box(p);
        handle.input_gradient(&[0.1, 0.2, 0.3, 0.4], 1).unwrap();
        assert_eq!(handle.gradient_query_count(), 1);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck::{central_diff_grad, relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: ToyPolicy<f64> = ToyPolicy::init(5, 3, TrainAlgorithm::QLearning, &mut rng);
        let obs = vec![0.3, -0.2, 0.8, 0.05, -0.6];
        let analytic = p.input_gradient(&obs, 2);
        let pc = p.clone();
        let numeric = central_diff_grad(
            move |o: &[f64]| {
                let probs = pc.action_probs(o);
                -probs[2].ln()
            },
            &obs,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-5);
        }
    }
}
