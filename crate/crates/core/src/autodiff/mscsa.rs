//! Fused forward/backward for multi-scale windowed causal self-attention
//! with sigmoid-gated fusion.
//!
//! For every position t and scale k, the query at t attends over the window
//! of positions [max(0, t-L_k+1), t]. That is exactly the last row of a full
//! causally-masked attention over the window, so only that row is computed.
//! Early positions see a shrunken window: masked-out padding carries zero
//! weight either way, so clamping is arithmetically identical.
//!
//! Fusion (row-vector convention): with o_k(t) the scale-k output and h(t)
//! the op input at t,
//!     gate_k(t) = sigmoid([o_k(t); h(t)] @ W_g),   W_g: [2d x d]
//!     z(t)      = sum_k gate_k(t) .* o_k(t)
//!
//! Heads partition the feature dimension; logits scale by 1/sqrt(d/heads).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::VarId;
use crate::scalar::Scalar;
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_into, Tensor};

/// Per-scale projection weights already registered on the tape.
#[derive(Clone, Copy)]
pub struct MscsaScaleWeights {
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
}

/// Saved forward context for the backward pass.
pub struct MscsaContext<F: Scalar> {
    windows: Vec<usize>,
    num_heads: usize,
    /// Per scale: projected Q, K, V, each [T x d].
    q: Vec<Tensor<F>>,
    k: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    /// attn[scale][t]: raw softmax weights, heads concatenated,
    /// layout [head0 w..., head1 w...], window length from position.
    attn: Vec<Vec<Vec<F>>>,
    /// Dropout masks over attention weights, same layout (empty in eval mode).
    attn_mask: Vec<Vec<Vec<F>>>,
    keep_inv: F,
    /// Per scale: attention output o_k, [T x d].
    o: Vec<Tensor<F>>,
    /// Per scale: sigmoid gates, [T x d].
    gates: Vec<Tensor<F>>,
}

impl<F: Scalar> MscsaContext<F> {
    pub fn scale_count(&self) -> usize {
        self.windows.len()
    }

    /// Scale-k attention output rows (exposed for locality tests and the
    /// per-position inspection API).
    pub fn scale_output(&self, scale: usize) -> &Tensor<F> {
        &self.o[scale]
    }

    pub fn gate(&self, scale: usize) -> &Tensor<F> {
        &self.gates[scale]
    }

    /// Raw softmax weights at (scale, position): heads-concatenated.
    pub fn attn_weights(&self, scale: usize, t: usize) -> &[F] {
        &self.attn[scale][t]
    }
}

pub struct MscsaBackward<F: Scalar> {
    pub dx: Tensor<F>,
    pub dweights: Vec<[Tensor<F>; 3]>,
    pub dw_gate: Tensor<F>,
}

fn window_start(t: usize, window: usize) -> usize {
    (t + 1).saturating_sub(window)
}

pub(super) fn forward<F: Scalar>(
    x: &Tensor<F>,
    weights: &[[&Tensor<F>; 3]],
    w_gate: &Tensor<F>,
    windows: &[usize],
    num_heads: usize,
    mut attn_dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> (Tensor<F>, MscsaContext<F>) {
    let (t_len, d) = (x.rows, x.cols);
    assert_eq!(weights.len(), windows.len(), "one weight triple per scale");
    assert!(num_heads > 0 && d % num_heads == 0, "heads must divide model dim");
    assert_eq!(w_gate.rows, 2 * d, "gate weight must be [2d x d]");
    assert_eq!(w_gate.cols, d, "gate weight must be [2d x d]");
    let dh = d / num_heads;
    let inv_sqrt = F::one() / F::from_f64_c(dh as f64).sqrt();
    let drop_p = attn_dropout.as_ref().map(|(p, _)| *p).unwrap_or(0.0);
    let keep_inv = F::from_f64_c(if drop_p > 0.0 { 1.0 / (1.0 - drop_p) } else { 1.0 });

    let n_scales = windows.len();
    let mut ctx = MscsaContext {
        windows: windows.to_vec(),
        num_heads,
        q: Vec::with_capacity(n_scales),
        k: Vec::with_capacity(n_scales),
        v: Vec::with_capacity(n_scales),
        attn: Vec::with_capacity(n_scales),
        attn_mask: Vec::with_capacity(n_scales),
        keep_inv,
        o: Vec::with_capacity(n_scales),
        gates: Vec::with_capacity(n_scales),
    };
    let mut z = Tensor::zeros(t_len, d);

    for (s, &window) in windows.iter().enumerate() {
        assert!(window >= 1, "window length must be positive");
        let [wq, wk, wv] = weights[s];
        assert_eq!((wq.rows, wq.cols), (d, d), "projection must be [d x d]");
        let mut q = Tensor::zeros(t_len, d);
        let mut k = Tensor::zeros(t_len, d);
        let mut v = Tensor::zeros(t_len, d);
        matmul_into(&x.data, &wq.data, &mut q.data, t_len, d, d);
        matmul_into(&x.data, &wk.data, &mut k.data, t_len, d, d);
        matmul_into(&x.data, &wv.data, &mut v.data, t_len, d, d);

        let mut o = Tensor::zeros(t_len, d);
        let mut attn_rows = Vec::with_capacity(t_len);
        let mut mask_rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let start = window_start(t, window);
            let wlen = t - start + 1;
            let mut alphas = vec![F::zero(); num_heads * wlen];
            let mut masks = if drop_p > 0.0 { vec![F::one(); num_heads * wlen] } else { vec![] };
            for h in 0..num_heads {
                let hoff = h * dh;
                let q_t = &q.row(t)[hoff..hoff + dh];
                // logits over the window, max-subtracted softmax
                let mut max = F::neg_infinity();
                let alpha = &mut alphas[h * wlen..(h + 1) * wlen];
                for (j, pos) in (start..=t).enumerate() {
                    let k_j = &k.row(pos)[hoff..hoff + dh];
                    let mut dot = F::zero();
                    for (a, b) in q_t.iter().zip(k_j) {
                        dot += *a * *b;
                    }
                    let logit = dot * inv_sqrt;
                    alpha[j] = logit;
                    if logit > max {
                        max = logit;
                    }
                }
                let mut sum = F::zero();
                for a in alpha.iter_mut() {
                    *a = (*a - max).exp();
                    sum += *a;
                }
                for a in alpha.iter_mut() {
                    *a /= sum;
                }
                // weighted value sum; dropout applies to the weights
                let o_t = &mut o.row_mut(t)[hoff..hoff + dh];
                for (j, pos) in (start..=t).enumerate() {
                    let mut w = alpha[j];
                    if drop_p > 0.0 {
                        let (p, rng) = attn_dropout.as_mut().unwrap();
                        let keep = rng.gen::<f64>() >= *p;
                        let m = if keep { F::one() } else { F::zero() };
                        masks[h * wlen + j] = m;
                        w = w * m * keep_inv;
                    }
                    if w == F::zero() {
                        continue;
                    }
                    let v_j = &v.row(pos)[hoff..hoff + dh];
                    for (ov, vv) in o_t.iter_mut().zip(v_j) {
                        *ov += w * *vv;
                    }
                }
            }
            attn_rows.push(alphas);
            mask_rows.push(masks);
        }

        // gated fusion: gate = sigmoid([o; x] @ W_g), z += gate .* o
        let mut gates = Tensor::zeros(t_len, d);
        for t in 0..t_len {
            let o_t = o.row(t);
            let x_t = x.row(t);
            for c in 0..d {
                let mut u = F::zero();
                for i in 0..d {
                    u += o_t[i] * w_gate.data[i * d + c];
                }
                for i in 0..d {
                    u += x_t[i] * w_gate.data[(d + i) * d + c];
                }
                let g = F::one() / (F::one() + (-u).exp());
                gates.data[t * d + c] = g;
                z.data[t * d + c] += g * o_t[c];
            }
        }

        ctx.q.push(q);
        ctx.k.push(k);
        ctx.v.push(v);
        ctx.attn.push(attn_rows);
        ctx.attn_mask.push(mask_rows);
        ctx.o.push(o);
        ctx.gates.push(gates);
    }

    (z, ctx)
}

pub(super) fn backward<F: Scalar>(
    ctx: &MscsaContext<F>,
    x: &Tensor<F>,
    weights: &[[&Tensor<F>; 3]],
    w_gate: &Tensor<F>,
    dz: &Tensor<F>,
) -> MscsaBackward<F> {
    let (t_len, d) = (x.rows, x.cols);
    let num_heads = ctx.num_heads;
    let dh = d / num_heads;
    let inv_sqrt = F::one() / F::from_f64_c(dh as f64).sqrt();
    let dropout = !ctx.attn_mask[0].is_empty() && !ctx.attn_mask[0][0].is_empty();

    let mut dx = Tensor::zeros(t_len, d);
    let mut dw_gate = Tensor::zeros(2 * d, d);
    let mut dweights = Vec::with_capacity(ctx.windows.len());

    for (s, &window) in ctx.windows.iter().enumerate() {
        let (q, k, v) = (&ctx.q[s], &ctx.k[s], &ctx.v[s]);
        let (o, gates) = (&ctx.o[s], &ctx.gates[s]);
        let mut d_o = Tensor::zeros(t_len, d);

        // fusion backward: z = gate .* o, gate = sigmoid(u), u = [o; x] @ W_g
        for t in 0..t_len {
            let o_t = o.row(t);
            let x_t = x.row(t);
            let dz_t = dz.row(t);
            let g_t = gates.row(t);
            let mut du = vec![F::zero(); d];
            for c in 0..d {
                d_o.data[t * d + c] += dz_t[c] * g_t[c];
                let dg = dz_t[c] * o_t[c];
                du[c] = dg * g_t[c] * (F::one() - g_t[c]);
            }
            for i in 0..d {
                let (ov, xv) = (o_t[i], x_t[i]);
                let dw_o = &mut dw_gate.data[i * d..(i + 1) * d];
                for (c, dwc) in dw_o.iter_mut().enumerate() {
                    *dwc += ov * du[c];
                }
                let dw_x = &mut dw_gate.data[(d + i) * d..(d + i + 1) * d];
                for (c, dwc) in dw_x.iter_mut().enumerate() {
                    *dwc += xv * du[c];
                }
            }
            // d[o; x] = du @ W_g^T
            for i in 0..d {
                let mut acc_o = F::zero();
                let mut acc_x = F::zero();
                for c in 0..d {
                    acc_o += du[c] * w_gate.data[i * d + c];
                    acc_x += du[c] * w_gate.data[(d + i) * d + c];
                }
                d_o.data[t * d + i] += acc_o;
                dx.data[t * d + i] += acc_x;
            }
        }

        // attention backward
        let mut dq = Tensor::zeros(t_len, d);
        let mut dk = Tensor::zeros(t_len, d);
        let mut dv = Tensor::zeros(t_len, d);
        for t in 0..t_len {
            let start = window_start(t, window);
            let wlen = t - start + 1;
            let alphas = &ctx.attn[s][t];
            for h in 0..num_heads {
                let hoff = h * dh;
                let do_t = &d_o.row(t)[hoff..hoff + dh];
                let alpha = &alphas[h * wlen..(h + 1) * wlen];
                // effective weights include the dropout mask scaling
                let mut d_alpha = vec![F::zero(); wlen];
                for (j, pos) in (start..=t).enumerate() {
                    let v_j = &v.row(pos)[hoff..hoff + dh];
                    let mut dot = F::zero();
                    for (a, b) in do_t.iter().zip(v_j) {
                        dot += *a * *b;
                    }
                    let m = if dropout {
                        ctx.attn_mask[s][t][h * wlen + j] * ctx.keep_inv
                    } else {
                        F::one()
                    };
                    // dV through the (possibly masked) weight
                    let w_eff = alpha[j] * m;
                    if w_eff != F::zero() {
                        let dv_j = &mut dv.row_mut(pos)[hoff..hoff + dh];
                        for (dvv, dov) in dv_j.iter_mut().zip(do_t) {
                            *dvv += w_eff * *dov;
                        }
                    }
                    d_alpha[j] = dot * m;
                }
                // softmax backward on raw alpha
                let mut inner = F::zero();
                for j in 0..wlen {
                    inner += alpha[j] * d_alpha[j];
                }
                for (j, pos) in (start..=t).enumerate() {
                    let dlogit = alpha[j] * (d_alpha[j] - inner) * inv_sqrt;
                    if dlogit == F::zero() {
                        continue;
                    }
                    let k_j = &k.row(pos)[hoff..hoff + dh];
                    let q_t = &q.row(t)[hoff..hoff + dh];
                    let dq_t = &mut dq.row_mut(t)[hoff..hoff + dh];
                    for (dqv, kv) in dq_t.iter_mut().zip(k_j) {
                        *dqv += dlogit * *kv;
                    }
                    let dk_j = &mut dk.row_mut(pos)[hoff..hoff + dh];
                    for (dkv, qv) in dk_j.iter_mut().zip(q_t) {
                        *dkv += dlogit * *qv;
                    }
                }
            }
        }

        // projections: Q = x @ Wq etc.
        let [wq, wk_w, wv_w] = weights[s];
        let mut dwq = Tensor::zeros(d, d);
        let mut dwk = Tensor::zeros(d, d);
        let mut dwv = Tensor::zeros(d, d);
        matmul_at_b_acc(&x.data, &dq.data, &mut dwq.data, t_len, d, d);
        matmul_at_b_acc(&x.data, &dk.data, &mut dwk.data, t_len, d, d);
        matmul_at_b_acc(&x.data, &dv.data, &mut dwv.data, t_len, d, d);
        matmul_a_bt_acc(&dq.data, &wq.data, &mut dx.data, t_len, d, d);
        matmul_a_bt_acc(&dk.data, &wk_w.data, &mut dx.data, t_len, d, d);
        matmul_a_bt_acc(&dv.data, &wv_w.data, &mut dx.data, t_len, d, d);
        dweights.push([dwq, dwk, dwv]);
    }

    MscsaBackward { dx, dweights, dw_gate }
}
