//! Multi-scale causal self-attention: token embedding with positional
//! encoding, K parallel causal attention windows of increasing length, and
//! sigmoid-gated fusion of the per-scale outputs.
//!
//! Conventions: row vectors throughout, so a projection written `W s` on
//! paper is `s_row @ W` here with `W: [in x out]`. The gate weight is
//! `[2d x d]`, applied to the concatenated row `[o_k ; h_t]`. Position t of
//! the scale-k branch attends over positions `[max(0, t-L_k+1), t]`;
//! shrinking the early windows is arithmetically identical to masked left
//! padding, since masked entries carry zero attention weight.

mod stack;

pub use stack::{LayerWeights, StackWeights, TransformerStack};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{MscsaScaleWeights, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Model-width configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            model_dim: 128,
            num_heads: 8,
            num_layers: 6,
            dropout_rate: 0.2,
            max_sequence_length: 512,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if self.max_sequence_length == 0 {
            return Err(Error::Config("max_sequence_length must be positive".into()));
        }
        Ok(())
    }
}

/// How per-scale window lengths grow with the scale index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowGrowth {
    Exponential,
    Linear,
    Fixed,
}

impl std::str::FromStr for WindowGrowth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(WindowGrowth::Exponential),
            "linear" => Ok(WindowGrowth::Linear),
            "fixed" => Ok(WindowGrowth::Fixed),
            other => Err(Error::Config(format!("unknown window growth '{other}'"))),
        }
    }
}

/// Number of scales and how their windows are derived.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleConfig {
    pub num_scales: usize,
    pub base_window: usize,
    pub growth: WindowGrowth,
    pub growth_ratio: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { num_scales: 3, base_window: 5, growth: WindowGrowth::Exponential, growth_ratio: 2.0 }
    }
}

impl ScaleConfig {
    /// Derived window lengths L_1..L_K. Strictly increasing unless growth is
    /// fixed; violations are construction errors.
    pub fn windows(&self) -> Result<Vec<usize>> {
        if self.num_scales == 0 || self.base_window == 0 {
            return Err(Error::Config("num_scales and base_window must be positive".into()));
        }
        if self.growth_ratio <= 0.0 {
            return Err(Error::Config("growth_ratio must be positive".into()));
        }
        let mut out = Vec::with_capacity(self.num_scales);
        for k in 0..self.num_scales {
            let len = match self.growth {
                WindowGrowth::Exponential => {
                    (self.growth_ratio.powi(k as i32) * self.base_window as f64).round() as usize
                }
                WindowGrowth::Linear => {
                    (self.base_window as f64 * (1.0 + self.growth_ratio * k as f64)).round() as usize
                }
                WindowGrowth::Fixed => self.base_window,
            };
            out.push(len.max(1));
        }
        match self.growth {
            WindowGrowth::Fixed => {
                if self.num_scales > 1 {
                    log::warn!(
                        "fixed window growth: all {} scales share length {}; multi-scale fusion degenerates",
                        self.num_scales,
                        self.base_window
                    );
                }
            }
            _ => {
                if out.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config(format!(
                        "derived windows {out:?} are not strictly increasing"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Same config with every window multiplied by `factor` (used when one
    /// logical step spans several tokens).
    pub fn scaled_windows(&self, factor: usize) -> Result<Vec<usize>> {
        Ok(self.windows()?.into_iter().map(|w| w * factor).collect())
    }
}

/// Attention parameters for one multi-scale layer plus the input embedding.
#[derive(Clone, Debug)]
pub struct AttentionParams<F: Scalar> {
    /// Per scale: W^Q, W^K, W^V, each [d x d].
    pub qkv: Vec<[Tensor<F>; 3]>,
    /// Fusion gate, [2d x d].
    pub w_gate: Tensor<F>,
    /// Input projection, [dim(s) x d].
    pub w_state: Tensor<F>,
    /// Positional table, [max_sequence_length x d].
    pub positional: Tensor<F>,
    /// Embedding layer-norm affine parameters, [1 x d] each.
    pub ln_gain: Tensor<F>,
    pub ln_bias: Tensor<F>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn init(
        state_dim: usize,
        embed: &EmbeddingConfig,
        scales: &ScaleConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        embed.validate()?;
        let d = embed.model_dim;
        let qkv = scales
            .windows()?
            .iter()
            .map(|_| {
                [
                    Tensor::xavier(d, d, rng),
                    Tensor::xavier(d, d, rng),
                    Tensor::xavier(d, d, rng),
                ]
            })
            .collect();
        Ok(AttentionParams {
            qkv,
            w_gate: Tensor::xavier(2 * d, d, rng),
            w_state: Tensor::xavier(state_dim, d, rng),
            positional: Tensor::uniform(embed.max_sequence_length, d, 0.02, rng),
            ln_gain: Tensor::ones(1, d),
            ln_bias: Tensor::zeros(1, d),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.qkv.iter().all(|t| t.iter().all(Tensor::is_finite))
            && self.w_gate.is_finite()
            && self.w_state.is_finite()
            && self.positional.is_finite()
            && self.ln_gain.is_finite()
            && self.ln_bias.is_finite()
    }
}

/// Per-position snapshot of the multi-scale attention state: the windowed
/// inputs, masks, softmax weights, per-scale outputs, and the fused vector.
#[derive(Clone, Debug)]
pub struct ScaleStack<F: Scalar> {
    /// Per scale: the hidden window [w_k x d] ending at the snapshot position.
    pub windows: Vec<Tensor<F>>,
    /// Per scale: causal mask [w_k x w_k] over {0, -inf}.
    pub masks: Vec<Tensor<F>>,
    /// Per scale: full windowed attention output [w_k x d].
    pub outputs: Vec<Tensor<F>>,
    /// Per scale: softmax weights of the full window attention, [w_k x w_k]
    /// stacked over heads -> [heads * w_k x w_k].
    pub attn_weights: Vec<Tensor<F>>,
    /// Per scale: sigmoid gate at the snapshot position, [1 x d].
    pub gates: Vec<Tensor<F>>,
    /// Fused vector z_t, [1 x d].
    pub fused: Tensor<F>,
}

/// Embed a state sequence: h_i = LayerNorm(s_i @ W_s + p_i).
///
/// Rows come out zero-mean, unit-variance per token before the affine
/// gain/bias; a constant row maps to zero via the epsilon guard.
pub fn embed_inputs<F: Scalar>(
    states: &Tensor<F>,
    params: &AttentionParams<F>,
    max_sequence_length: usize,
) -> Result<Tensor<F>> {
    if states.rows > max_sequence_length {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds max_sequence_length {}",
            states.rows, max_sequence_length
        )));
    }
    if states.cols != params.w_state.rows {
        return Err(Error::Shape(format!(
            "state width {} does not match input projection rows {}",
            states.cols, params.w_state.rows
        )));
    }
    let mut tape: Tape<F> = Tape::new();
    let s = tape.constant(states.clone());
    let w = tape.constant(params.w_state.clone());
    let p_full = tape.constant(params.positional.clone());
    let p = tape.narrow_rows(p_full, 0, states.rows);
    let proj = tape.matmul(s, w);
    let summed = tape.add(proj, p);
    let gain = tape.constant(params.ln_gain.clone());
    let bias = tape.constant(params.ln_bias.clone());
    let out = tape.layer_norm(summed, gain, bias, F::from_f64_c(LAYER_NORM_EPS));
    Ok(tape.value(out).clone())
}

/// Lower-triangular-zero causal mask: 0 where j <= i, -inf where j > i.
pub fn build_causal_mask<F: Scalar>(len: usize) -> Result<Tensor<F>> {
    if len == 0 {
        return Err(Error::Domain("mask length must be at least 1".into()));
    }
    let mut m = Tensor::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, F::neg_infinity());
        }
    }
    Ok(m)
}

/// Full windowed attention: Softmax(Q K^T / sqrt(d_head) + M) V with
/// head-partitioned projections. Returns (output [L x d], stacked per-head
/// weights [heads*L x L]).
pub fn scale_attention<F: Scalar>(
    window: &Tensor<F>,
    wq: &Tensor<F>,
    wk: &Tensor<F>,
    wv: &Tensor<F>,
    mask: &Tensor<F>,
    num_heads: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (len, d) = (window.rows, window.cols);
    if mask.rows != len || mask.cols != len {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match window length {}",
            mask.rows, mask.cols, len
        )));
    }
    if wq.rows != d || wk.rows != d || wv.rows != d {
        return Err(Error::Shape("projection height does not match model dim".into()));
    }
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Shape(format!("{num_heads} heads do not divide model dim {d}")));
    }
    let dh = d / num_heads;
    let scale = F::one() / F::from_f64_c(dh as f64).sqrt();
    let q = window.matmul(wq);
    let k = window.matmul(wk);
    let v = window.matmul(wv);
    let mut out = Tensor::zeros(len, d);
    let mut weights = Tensor::zeros(num_heads * len, len);
    for h in 0..num_heads {
        let hoff = h * dh;
        for i in 0..len {
            let mut logits = vec![F::neg_infinity(); len];
            let mut max = F::neg_infinity();
            for j in 0..len {
                let m = mask.get(i, j);
                if m == F::neg_infinity() {
                    continue;
                }
                let mut dot = F::zero();
                for c in 0..dh {
                    dot += q.get(i, hoff + c) * k.get(j, hoff + c);
                }
                logits[j] = dot * scale + m;
                if logits[j] > max {
                    max = logits[j];
                }
            }
            let mut sum = F::zero();
            for l in logits.iter_mut() {
                if *l == F::neg_infinity() {
                    *l = F::zero();
                } else {
                    *l = (*l - max).exp();
                    sum += *l;
                }
            }
            for (j, l) in logits.iter_mut().enumerate() {
                *l /= sum;
                weights.set(h * len + i, j, *l);
                if *l == F::zero() {
                    continue;
                }
                for c in 0..dh {
                    let cur = out.get(i, hoff + c);
                    out.set(i, hoff + c, cur + *l * v.get(j, hoff + c));
                }
            }
        }
    }
    Ok((out, weights))
}

/// Gated fusion of per-scale final tokens: z = sum_k sigmoid([o_k; h] @ W_g) .* o_k.
/// Also returns the per-scale gates (all entries strictly inside (0, 1)).
pub fn gated_fusion<F: Scalar>(
    per_scale: &[Vec<F>],
    current: &[F],
    w_gate: &Tensor<F>,
) -> Result<(Vec<F>, Vec<Vec<F>>)> {
    if per_scale.is_empty() {
        return Err(Error::Shape("fusion needs at least one scale".into()));
    }
    let d = current.len();
    if w_gate.rows != 2 * d || w_gate.cols != d {
        return Err(Error::Shape(format!(
            "gate weight {}x{} does not match model dim {d}",
            w_gate.rows, w_gate.cols
        )));
    }
    let mut z = vec![F::zero(); d];
    let mut gates = Vec::with_capacity(per_scale.len());
    for o in per_scale {
        if o.len() != d {
            return Err(Error::Shape("scale output width mismatch".into()));
        }
        let mut gate = vec![F::zero(); d];
        for c in 0..d {
            let mut u = F::zero();
            for i in 0..d {
                u += o[i] * w_gate.get(i, c);
            }
            for i in 0..d {
                u += current[i] * w_gate.get(d + i, c);
            }
            let g = F::one() / (F::one() + (-u).exp());
            gate[c] = g;
            z[c] += g * o[c];
        }
        gates.push(gate);
    }
    Ok((z, gates))
}

/// One multi-scale attention + fusion layer applied at every position of an
/// already-embedded sequence. Deterministic (no dropout); the training path
/// goes through [`TransformerStack`].
pub fn mscsa_forward<F: Scalar>(
    sequence: &Tensor<F>,
    scales: &ScaleConfig,
    params: &AttentionParams<F>,
    num_heads: usize,
) -> Result<Tensor<F>> {
    let windows = scales.windows()?;
    if params.qkv.len() != windows.len() {
        return Err(Error::Shape(format!(
            "{} projection triples for {} scales",
            params.qkv.len(),
            windows.len()
        )));
    }
    if sequence.rows == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let mut tape: Tape<F> = Tape::new();
    let x = tape.constant(sequence.clone());
    let scale_weights: Vec<MscsaScaleWeights> = params
        .qkv
        .iter()
        .map(|[wq, wk, wv]| MscsaScaleWeights {
            wq: tape.constant(wq.clone()),
            wk: tape.constant(wk.clone()),
            wv: tape.constant(wv.clone()),
        })
        .collect();
    let w_gate = tape.constant(params.w_gate.clone());
    let out = tape.mscsa(x, &scale_weights, w_gate, &windows, num_heads, None);
    Ok(tape.value(out).clone())
}

/// Snapshot the full per-window attention state at one position, computed
/// through [`scale_attention`] (the windowed route, independent of the fused
/// per-position kernel).
pub fn scale_stack_at<F: Scalar>(
    sequence: &Tensor<F>,
    position: usize,
    scales: &ScaleConfig,
    params: &AttentionParams<F>,
    num_heads: usize,
) -> Result<ScaleStack<F>> {
    if position >= sequence.rows {
        return Err(Error::Shape("position out of range".into()));
    }
    let windows = scales.windows()?;
    let d = sequence.cols;
    let mut window_tensors = Vec::new();
    let mut masks = Vec::new();
    let mut outputs = Vec::new();
    let mut weights_all = Vec::new();
    let mut finals = Vec::new();
    for (k, &len) in windows.iter().enumerate() {
        let start = (position + 1).saturating_sub(len);
        let wlen = position - start + 1;
        let mut win = Tensor::zeros(wlen, d);
        for (r, pos) in (start..=position).enumerate() {
            win.row_mut(r).copy_from_slice(sequence.row(pos));
        }
        let mask = build_causal_mask::<F>(wlen)?;
        let [wq, wk, wv] = &params.qkv[k];
        let (out, w) = scale_attention(&win, wq, wk, wv, &mask, num_heads)?;
        finals.push(out.row(wlen - 1).to_vec());
        window_tensors.push(win);
        masks.push(mask);
        outputs.push(out);
        weights_all.push(w);
    }
    let current = sequence.row(position).to_vec();
    let (fused, gates) = gated_fusion(&finals, &current, &params.w_gate)?;
    Ok(ScaleStack {
        windows: window_tensors,
        masks,
        outputs,
        attn_weights: weights_all,
        gates: gates.into_iter().map(Tensor::row_vec).collect(),
        fused: Tensor::row_vec(fused),
    })
}
