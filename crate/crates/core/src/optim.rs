//! Adam optimizer over named parameter lists.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64_c(lr),
            beta1: F::from_f64_c(0.9),
            beta2: F::from_f64_c(0.999),
            eps: F::from_f64_c(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `params` and `grads` must be in a stable slot order
    /// across calls; moment buffers are allocated lazily on first use.
    pub fn update(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<&Tensor<F>>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        }
        if self.lr == F::zero() {
            // lr = 0 must leave parameters bit-identical
            self.step += 1;
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            debug_assert_eq!(p.numel(), g.numel());
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (F::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (F::one() - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
