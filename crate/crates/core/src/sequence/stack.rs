//! Multi-layer decoder stack: pre-norm blocks of multi-scale attention with
//! gated fusion, followed by a two-layer feed-forward, residuals around both,
//! and a final layer norm.

use rand_chacha::ChaCha8Rng;

use super::LAYER_NORM_EPS;
use crate::autodiff::{linear, MscsaScaleWeights, Tape, VarId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerWeights<F: Scalar> {
    pub qkv: Vec<[Tensor<F>; 3]>,
    pub w_gate: Tensor<F>,
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub mlp_w1: Tensor<F>,
    pub mlp_b1: Tensor<F>,
    pub mlp_w2: Tensor<F>,
    pub mlp_b2: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct StackWeights<F: Scalar> {
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_gain: Tensor<F>,
    pub lnf_bias: Tensor<F>,
}

/// Decoder stack configuration + weights, applied on a tape so the training
/// path gets gradients for free.
#[derive(Clone, Debug)]
pub struct TransformerStack<F: Scalar> {
    pub weights: StackWeights<F>,
    pub windows: Vec<usize>,
    pub num_heads: usize,
    pub dropout_rate: f64,
}

struct LayerVars {
    qkv: Vec<MscsaScaleWeights>,
    w_gate: VarId,
    ln1_gain: VarId,
    ln1_bias: VarId,
    ln2_gain: VarId,
    ln2_bias: VarId,
    mlp_w1: VarId,
    mlp_b1: VarId,
    mlp_w2: VarId,
    mlp_b2: VarId,
}

pub struct StackVars {
    layers: Vec<LayerVars>,
    lnf_gain: VarId,
    lnf_bias: VarId,
    /// Flat list aligned with [`TransformerStack::param_list`] order.
    pub flat: Vec<VarId>,
}

impl<F: Scalar> TransformerStack<F> {
    pub fn init(
        model_dim: usize,
        num_layers: usize,
        num_heads: usize,
        windows: Vec<usize>,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = model_dim;
        let hidden = 4 * d;
        let layers = (0..num_layers)
            .map(|_| LayerWeights {
                qkv: windows
                    .iter()
                    .map(|_| {
                        [
                            Tensor::xavier(d, d, rng),
                            Tensor::xavier(d, d, rng),
                            Tensor::xavier(d, d, rng),
                        ]
                    })
                    .collect(),
                w_gate: Tensor::xavier(2 * d, d, rng),
                ln1_gain: Tensor::ones(1, d),
                ln1_bias: Tensor::zeros(1, d),
                ln2_gain: Tensor::ones(1, d),
                ln2_bias: Tensor::zeros(1, d),
                mlp_w1: Tensor::xavier(d, hidden, rng),
                mlp_b1: Tensor::zeros(1, hidden),
                mlp_w2: Tensor::xavier(hidden, d, rng),
                mlp_b2: Tensor::zeros(1, d),
            })
            .collect();
        TransformerStack {
            weights: StackWeights {
                layers,
                lnf_gain: Tensor::ones(1, d),
                lnf_bias: Tensor::zeros(1, d),
            },
            windows,
            num_heads,
            dropout_rate,
        }
    }

    pub fn param_list(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.weights.layers.iter().enumerate() {
            for (s, [wq, wk, wv]) in l.qkv.iter().enumerate() {
                out.push((format!("layer{i}.scale{s}.wq"), wq));
                out.push((format!("layer{i}.scale{s}.wk"), wk));
                out.push((format!("layer{i}.scale{s}.wv"), wv));
            }
            out.push((format!("layer{i}.w_gate"), &l.w_gate));
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layer{i}.mlp_w1"), &l.mlp_w1));
            out.push((format!("layer{i}.mlp_b1"), &l.mlp_b1));
            out.push((format!("layer{i}.mlp_w2"), &l.mlp_w2));
            out.push((format!("layer{i}.mlp_b2"), &l.mlp_b2));
        }
        out.push(("lnf_gain".into(), &self.weights.lnf_gain));
        out.push(("lnf_bias".into(), &self.weights.lnf_bias));
        out
    }

    pub fn param_list_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, l) in self.weights.layers.iter_mut().enumerate() {
            for (s, [wq, wk, wv]) in l.qkv.iter_mut().enumerate() {
                out.push((format!("layer{i}.scale{s}.wq"), wq));
                out.push((format!("layer{i}.scale{s}.wk"), wk));
                out.push((format!("layer{i}.scale{s}.wv"), wv));
            }
            out.push((format!("layer{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layer{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
            out.push((format!("layer{i}.mlp_w1"), &mut l.mlp_w1));
            out.push((format!("layer{i}.mlp_b1"), &mut l.mlp_b1));
            out.push((format!("layer{i}.mlp_w2"), &mut l.mlp_w2));
            out.push((format!("layer{i}.mlp_b2"), &mut l.mlp_b2));
        }
        out.push(("lnf_gain".into(), &mut self.weights.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.weights.lnf_bias));
        out
    }

    /// Register every weight on the tape, in `param_list` order.
    pub fn bind(&self, tape: &mut Tape<F>) -> StackVars {
        let mut flat = Vec::new();
        let mut layers = Vec::new();
        for l in &self.weights.layers {
            let qkv: Vec<MscsaScaleWeights> = l
                .qkv
                .iter()
                .map(|[wq, wk, wv]| {
                    let ids = MscsaScaleWeights {
                        wq: tape.param(wq.clone()),
                        wk: tape.param(wk.clone()),
                        wv: tape.param(wv.clone()),
                    };
                    flat.extend_from_slice(&[ids.wq, ids.wk, ids.wv]);
                    ids
                })
                .collect();
            let w_gate = tape.param(l.w_gate.clone());
            let ln1_gain = tape.param(l.ln1_gain.clone());
            let ln1_bias = tape.param(l.ln1_bias.clone());
            let ln2_gain = tape.param(l.ln2_gain.clone());
            let ln2_bias = tape.param(l.ln2_bias.clone());
            let mlp_w1 = tape.param(l.mlp_w1.clone());
            let mlp_b1 = tape.param(l.mlp_b1.clone());
            let mlp_w2 = tape.param(l.mlp_w2.clone());
            let mlp_b2 = tape.param(l.mlp_b2.clone());
            flat.extend_from_slice(&[
                w_gate, ln1_gain, ln1_bias, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
            ]);
            layers.push(LayerVars {
                qkv,
                w_gate,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let lnf_gain = tape.param(self.weights.lnf_gain.clone());
        let lnf_bias = tape.param(self.weights.lnf_bias.clone());
        flat.extend_from_slice(&[lnf_gain, lnf_bias]);
        StackVars { layers, lnf_gain, lnf_bias, flat }
    }

    /// Run the stack over an embedded token sequence. `dropout_rng` enables
    /// the stochastic training mode; `None` is the deterministic eval path.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: &StackVars,
        x: VarId,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> VarId {
        let eps = F::from_f64_c(LAYER_NORM_EPS);
        let mut h = x;
        for layer in &vars.layers {
            let normed = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias, eps);
            let fused = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let a = tape.mscsa(
                        normed,
                        &layer.qkv,
                        layer.w_gate,
                        &self.windows,
                        self.num_heads,
                        Some((self.dropout_rate, rng)),
                    );
                    tape.dropout(a, self.dropout_rate, rng)
                }
                _ => tape.mscsa(normed, &layer.qkv, layer.w_gate, &self.windows, self.num_heads, None),
            };
            h = tape.add(h, fused);
            let normed2 = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias, eps);
            let pre = linear(tape, normed2, layer.mlp_w1, layer.mlp_b1);
            let act = tape.relu(pre);
            let mlp = linear(tape, act, layer.mlp_w2, layer.mlp_b2);
            h = tape.add(h, mlp);
        }
        tape.layer_norm(h, vars.lnf_gain, vars.lnf_bias, eps)
    }
}
