//! Reverse-mode autodiff over a flat op tape.
//!
//! Models build a [`Tape`] per loss evaluation: leaves are parameter /
//! constant tensors, interior nodes record enough context to run the
//! hand-derived backward pass. The op set is deliberately small; anything
//! architecture-specific (windowed multi-scale attention, asymmetric
//! regression losses, norm penalties) is a fused op with its own backward.
//!
//! Gradient correctness against central finite differences is part of the
//! verification surface, not just a dev aid; see [`gradcheck`].

pub mod gradcheck;
mod mscsa;

pub use mscsa::{MscsaContext, MscsaScaleWeights};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

/// Which vector norm a norm-penalty op applies per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::L1 => write!(f, "l1"),
            NormKind::L2 => write!(f, "l2"),
            NormKind::LInf => write!(f, "linf"),
        }
    }
}

enum Op<F: Scalar> {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(F),
    /// x [m x n] + bias [1 x n] broadcast over rows.
    AddRowBroadcast,
    Relu,
    Sigmoid,
    /// Row-wise layer norm with affine gain/bias; saves per-row mean and 1/std.
    LayerNorm { mean: Vec<F>, inv_std: Vec<F> },
    SoftmaxRows,
    /// Rows of a table selected by index (embedding lookup).
    EmbedLookup { ids: Vec<usize> },
    SelectRows { ids: Vec<usize> },
    NarrowRows { start: usize },
    /// Rows of several sources scattered into one matrix; `placements[i][r]`
    /// is the destination row of source i's row r.
    ScatterRows { placements: Vec<Vec<usize>> },
    Reshape { in_rows: usize, in_cols: usize },
    PermuteCols { perm: Vec<usize> },
    /// Mean over consecutive groups of `group` rows.
    MeanPoolGroups { group: usize },
    ConcatCols,
    MeanAll,
    SumAll,
    /// (1/rows) * sum of squared entries == mean over rows of ||row||^2.
    MeanRowSqnorm,
    /// (1/rows) * sum over rows of ||row||_p; saves per-row norms.
    NormRowsMean { kind: NormKind, row_norms: Vec<F> },
    /// (1/rows) * sum of |sigma - 1(v<0)| * v^2 over a column vector.
    ExpectileMean { sigma: F },
    /// Mean (optionally per-row-weighted) cross-entropy of row softmax vs
    /// integer labels; saves the softmax probabilities.
    SoftmaxCrossEntropy { labels: Vec<usize>, weights: Option<Vec<F>>, probs: Tensor<F> },
    /// One column picked per row: out[r] = x[r, ids[r]].
    SelectColsPerRow { ids: Vec<usize> },
    Dropout { mask: Vec<F>, keep_inv: F },
    /// Multi-scale windowed causal self-attention with gated fusion.
    Mscsa { ctx: Box<MscsaContext<F>> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    inputs: Vec<VarId>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients indexed by `VarId`; only nodes reachable from the loss with
/// `needs_grad` carry a tensor.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, inputs: Vec<VarId>, op: Op<F>) -> VarId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, inputs, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> VarId {
        self.nodes.push(Node { value, inputs: vec![], op: Op::Leaf, needs_grad: true });
        VarId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (data, targets).
    pub fn constant(&mut self, value: Tensor<F>) -> VarId {
        self.nodes.push(Node { value, inputs: vec![], op: Op::Leaf, needs_grad: false });
        VarId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, vec![a, b], Op::Matmul)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let mut v = ta.clone();
        v.add_in_place(tb);
        self.push(v, vec![a, b], Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| *x - *y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(v, vec![a, b], Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| *x * *y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(v, vec![a, b], Op::Mul)
    }

    pub fn scale(&mut self, a: VarId, c: F) -> VarId {
        let mut v = self.value(a).clone();
        v.scale_in_place(c);
        self.push(v, vec![a], Op::Scale(c))
    }

    pub fn add_row_broadcast(&mut self, x: VarId, bias: VarId) -> VarId {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tb.rows, 1, "bias must be a row vector");
        assert_eq!(tx.cols, tb.cols, "bias width mismatch");
        let mut v = tx.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += tb.data[c];
            }
        }
        self.push(v, vec![x, bias], Op::AddRowBroadcast)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let v = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(v, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| F::one() / (F::one() + (-v).exp())).collect();
        let v = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(v, vec![x], Op::Sigmoid)
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: F) -> VarId {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        assert_eq!(self.value(gain).cols, cols, "layer norm gain width");
        assert_eq!(self.value(bias).cols, cols, "layer norm bias width");
        let n = F::from_f64_c(cols as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mu: F = row.iter().copied().sum::<F>() / n;
            let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            mean.push(mu);
            inv_std.push(is);
            let g = self.value(gain);
            let b = self.value(bias);
            for c in 0..cols {
                let xhat = (row[c] - mu) * is;
                out.data[r * cols + c] = g.data[c] * xhat + b.data[c];
            }
        }
        self.push(out, vec![x, gain, bias], Op::LayerNorm { mean, inv_std })
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for c in 0..tx.cols {
                let e = (row[c] - max).exp();
                out.data[r * tx.cols + c] = e;
                sum += e;
            }
            for c in 0..tx.cols {
                out.data[r * tx.cols + c] /= sum;
            }
        }
        self.push(out, vec![x], Op::SoftmaxRows)
    }

    pub fn embed_lookup(&mut self, table: VarId, ids: &[usize]) -> VarId {
        let tt = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tt.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tt.rows, "embedding id out of range");
            out.row_mut(r).copy_from_slice(tt.row(id));
        }
        self.push(out, vec![table], Op::EmbedLookup { ids: ids.to_vec() })
    }

    pub fn select_rows(&mut self, x: VarId, ids: &[usize]) -> VarId {
        let tx = self.value(x);
        let mut out = Tensor::zeros(ids.len(), tx.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tx.row(id));
        }
        self.push(out, vec![x], Op::SelectRows { ids: ids.to_vec() })
    }

    pub fn narrow_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let tx = self.value(x);
        assert!(start + len <= tx.rows, "narrow out of range");
        let cols = tx.cols;
        let data = tx.data[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(len, cols, data), vec![x], Op::NarrowRows { start })
    }

    /// Scatter rows of `sources` into a fresh [total_rows x cols] matrix.
    /// Every destination row must be covered exactly once.
    pub fn scatter_rows(&mut self, sources: &[(VarId, Vec<usize>)], total_rows: usize) -> VarId {
        let cols = self.value(sources[0].0).cols;
        let mut out = Tensor::zeros(total_rows, cols);
        let mut covered = vec![false; total_rows];
        for (src, rows) in sources {
            let ts = self.value(*src);
            assert_eq!(ts.cols, cols, "scatter width mismatch");
            assert_eq!(ts.rows, rows.len(), "scatter row-count mismatch");
            for (r, &dest) in rows.iter().enumerate() {
                assert!(!covered[dest], "scatter destination covered twice");
                covered[dest] = true;
                out.row_mut(dest).copy_from_slice(ts.row(r));
            }
        }
        assert!(covered.iter().all(|&c| c), "scatter left a row uncovered");
        let placements = sources.iter().map(|(_, rows)| rows.clone()).collect();
        let inputs = sources.iter().map(|(v, _)| *v).collect();
        self.push(out, inputs, Op::ScatterRows { placements })
    }

    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> VarId {
        let tx = self.value(x);
        assert_eq!(tx.numel(), rows * cols, "reshape numel mismatch");
        let op = Op::Reshape { in_rows: tx.rows, in_cols: tx.cols };
        let v = Tensor::from_vec(rows, cols, tx.data.clone());
        self.push(v, vec![x], op)
    }

    /// out[:, j] = x[:, perm[j]].
    pub fn permute_cols(&mut self, x: VarId, perm: &[usize]) -> VarId {
        let tx = self.value(x);
        assert_eq!(perm.len(), tx.cols, "permutation length mismatch");
        let mut out = Tensor::zeros(tx.rows, tx.cols);
        for r in 0..tx.rows {
            for (j, &p) in perm.iter().enumerate() {
                out.data[r * tx.cols + j] = tx.data[r * tx.cols + p];
            }
        }
        self.push(out, vec![x], Op::PermuteCols { perm: perm.to_vec() })
    }

    pub fn mean_pool_groups(&mut self, x: VarId, group: usize) -> VarId {
        let tx = self.value(x);
        assert!(group > 0 && tx.rows % group == 0, "pool group must divide rows");
        let out_rows = tx.rows / group;
        let inv = F::one() / F::from_f64_c(group as f64);
        let mut out = Tensor::zeros(out_rows, tx.cols);
        for r in 0..tx.rows {
            let o = r / group;
            for c in 0..tx.cols {
                out.data[o * tx.cols + c] += tx.data[r * tx.cols + c] * inv;
            }
        }
        self.push(out, vec![x], Op::MeanPoolGroups { group })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let tp = self.value(*p);
            assert_eq!(tp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + tp.cols].copy_from_slice(tp.row(r));
            }
            off += tp.cols;
        }
        self.push(out, parts.to_vec(), Op::ConcatCols)
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let m = F::from_f64_c(tx.numel() as f64);
        let v = tx.data.iter().copied().sum::<F>() / m;
        self.push(Tensor::scalar(v), vec![x], Op::MeanAll)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let v = tx.data.iter().copied().sum::<F>();
        self.push(Tensor::scalar(v), vec![x], Op::SumAll)
    }

    pub fn mean_row_sqnorm(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let m = F::from_f64_c(tx.rows as f64);
        let v = tx.data.iter().map(|&v| v * v).sum::<F>() / m;
        self.push(Tensor::scalar(v), vec![x], Op::MeanRowSqnorm)
    }

    pub fn norm_rows_mean(&mut self, x: VarId, kind: NormKind) -> VarId {
        let tx = self.value(x);
        let mut row_norms = Vec::with_capacity(tx.rows);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let n = match kind {
                NormKind::L1 => row.iter().map(|v| v.abs()).sum(),
                NormKind::L2 => row.iter().map(|&v| v * v).sum::<F>().sqrt(),
                NormKind::LInf => row.iter().map(|v| v.abs()).fold(F::zero(), F::max),
            };
            row_norms.push(n);
        }
        let m = F::from_f64_c(tx.rows as f64);
        let v = row_norms.iter().copied().sum::<F>() / m;
        self.push(Tensor::scalar(v), vec![x], Op::NormRowsMean { kind, row_norms })
    }

    /// Mean of |sigma - 1(v < 0)| * v^2 over all entries of `diff`.
    pub fn expectile_mean(&mut self, diff: VarId, sigma: F) -> VarId {
        let td = self.value(diff);
        let m = F::from_f64_c(td.numel() as f64);
        let v = td
            .data
            .iter()
            .map(|&nu| {
                let w = if nu < F::zero() { (sigma - F::one()).abs() } else { sigma };
                w * nu * nu
            })
            .sum::<F>()
            / m;
        self.push(Tensor::scalar(v), vec![diff], Op::ExpectileMean { sigma })
    }

    /// Mean cross-entropy of softmax(logits) against integer labels, with
    /// optional per-row weights (used by score-function policy updates).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
        weights: Option<&[F]>,
    ) -> VarId {
        let tx = self.value(logits);
        assert_eq!(tx.rows, labels.len(), "one label per row");
        if let Some(w) = weights {
            assert_eq!(w.len(), labels.len(), "one weight per row");
        }
        let mut probs = Tensor::zeros(tx.rows, tx.cols);
        let mut total = F::zero();
        for r in 0..tx.rows {
            let row = tx.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for c in 0..tx.cols {
                let e = (row[c] - max).exp();
                probs.data[r * tx.cols + c] = e;
                sum += e;
            }
            for c in 0..tx.cols {
                probs.data[r * tx.cols + c] /= sum;
            }
            let p = probs.data[r * tx.cols + labels[r]];
            let nll = -(p.max(F::from_f64_c(1e-300))).ln();
            let w = weights.map(|w| w[r]).unwrap_or_else(F::one);
            total += w * nll;
        }
        let m = F::from_f64_c(tx.rows as f64);
        let value = Tensor::scalar(total / m);
        let op = Op::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
            weights: weights.map(|w| w.to_vec()),
            probs,
        };
        self.push(value, vec![logits], op)
    }

    /// out[r, 0] = x[r, ids[r]].
    pub fn select_cols_per_row(&mut self, x: VarId, ids: &[usize]) -> VarId {
        let tx = self.value(x);
        assert_eq!(tx.rows, ids.len(), "one column index per row");
        let mut out = Tensor::zeros(tx.rows, 1);
        for (r, &c) in ids.iter().enumerate() {
            assert!(c < tx.cols, "column index out of range");
            out.data[r] = tx.get(r, c);
        }
        self.push(out, vec![x], Op::SelectColsPerRow { ids: ids.to_vec() })
    }

    /// Inverted dropout: zeroes entries with probability `p`, scales the rest
    /// by 1/(1-p). Identity when `p == 0`.
    pub fn dropout(&mut self, x: VarId, p: f64, rng: &mut ChaCha8Rng) -> VarId {
        if p <= 0.0 {
            return x;
        }
        let tx = self.value(x);
        let keep_inv = F::from_f64_c(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..tx.numel())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { F::one() })
            .collect();
        let data = tx.data.iter().zip(&mask).map(|(&v, &m)| v * m * keep_inv).collect();
        let v = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(v, vec![x], Op::Dropout { mask, keep_inv })
    }

    /// Fused multi-scale causal attention + gated fusion; see [`mscsa`].
    pub fn mscsa(
        &mut self,
        x: VarId,
        scales: &[MscsaScaleWeights],
        w_gate: VarId,
        windows: &[usize],
        num_heads: usize,
        attn_dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> VarId {
        let mut inputs = vec![x];
        for s in scales {
            inputs.extend_from_slice(&[s.wq, s.wk, s.wv]);
        }
        inputs.push(w_gate);
        let weight_tensors: Vec<[&Tensor<F>; 3]> = scales
            .iter()
            .map(|s| [self.value(s.wq), self.value(s.wk), self.value(s.wv)])
            .collect();
        let (out, ctx) = mscsa::forward(
            self.value(x),
            &weight_tensors,
            self.value(w_gate),
            windows,
            num_heads,
            attn_dropout,
        );
        self.push(out, inputs, Op::Mscsa { ctx: Box::new(ctx) })
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Gradients<F> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate(i, &dy, &mut grads);
            // Leaves keep their gradient; interior nodes may also be read
            // later, so restore it.
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn acc_into(grads: &mut [Option<Tensor<F>>], id: VarId, add: Tensor<F>) {
        match &mut grads[id.0] {
            Some(g) => g.add_in_place(&add),
            slot @ None => *slot = Some(add),
        }
    }

    fn accumulate(&self, i: usize, dy: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let node = &self.nodes[i];
        let needs = |id: VarId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (ta, tb) = (self.value(a), self.value(b));
                if needs(a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    matmul_a_bt_acc(&dy.data, &tb.data, &mut da.data, ta.rows, tb.cols, ta.cols);
                    Self::acc_into(grads, a, da);
                }
                if needs(b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    matmul_at_b_acc(&ta.data, &dy.data, &mut db.data, ta.rows, ta.cols, tb.cols);
                    Self::acc_into(grads, b, db);
                }
            }
            Op::Add => {
                for &inp in &node.inputs {
                    if needs(inp) {
                        Self::acc_into(grads, inp, dy.clone());
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    Self::acc_into(grads, a, dy.clone());
                }
                if needs(b) {
                    let mut neg = dy.clone();
                    neg.scale_in_place(-F::one());
                    Self::acc_into(grads, b, neg);
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let tb = self.value(b);
                    let data = dy.data.iter().zip(&tb.data).map(|(x, y)| *x * *y).collect();
                    Self::acc_into(grads, a, Tensor::from_vec(dy.rows, dy.cols, data));
                }
                if needs(b) {
                    let ta = self.value(a);
                    let data = dy.data.iter().zip(&ta.data).map(|(x, y)| *x * *y).collect();
                    Self::acc_into(grads, b, Tensor::from_vec(dy.rows, dy.cols, data));
                }
            }
            Op::Scale(c) => {
                let mut d = dy.clone();
                d.scale_in_place(*c);
                Self::acc_into(grads, node.inputs[0], d);
            }
            Op::AddRowBroadcast => {
                let (x, bias) = (node.inputs[0], node.inputs[1]);
                if needs(x) {
                    Self::acc_into(grads, x, dy.clone());
                }
                if needs(bias) {
                    let mut db = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            db.data[c] += dy.data[r * dy.cols + c];
                        }
                    }
                    Self::acc_into(grads, bias, db);
                }
            }
            Op::Relu => {
                let tx = self.value(node.inputs[0]);
                let data = dy
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(&d, &x)| if x > F::zero() { d } else { F::zero() })
                    .collect();
                Self::acc_into(grads, node.inputs[0], Tensor::from_vec(dy.rows, dy.cols, data));
            }
            Op::Sigmoid => {
                let y = &node.value;
                let data = dy
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&d, &s)| d * s * (F::one() - s))
                    .collect();
                Self::acc_into(grads, node.inputs[0], Tensor::from_vec(dy.rows, dy.cols, data));
            }
            Op::LayerNorm { mean, inv_std } => {
                let (x, gain, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let tx = self.value(x);
                let tg = self.value(gain);
                let (rows, cols) = (tx.rows, tx.cols);
                let n = F::from_f64_c(cols as f64);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let is = inv_std[r];
                    let mu = mean[r];
                    let xr = tx.row(r);
                    let dyr = dy.row(r);
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    let mut xhat = vec![F::zero(); cols];
                    let mut dxhat = vec![F::zero(); cols];
                    for c in 0..cols {
                        xhat[c] = (xr[c] - mu) * is;
                        dxhat[c] = dyr[c] * tg.data[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat[c];
                        dg.data[c] += dyr[c] * xhat[c];
                        db.data[c] += dyr[c];
                    }
                    if needs(x) {
                        for c in 0..cols {
                            dx.data[r * cols + c] = is
                                * (dxhat[c] - sum_dxhat / n - xhat[c] * sum_dxhat_xhat / n);
                        }
                    }
                }
                if needs(x) {
                    Self::acc_into(grads, x, dx);
                }
                if needs(gain) {
                    Self::acc_into(grads, gain, dg);
                }
                if needs(bias) {
                    Self::acc_into(grads, bias, db);
                }
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: F = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = yr[c] * (dyr[c] - dot);
                    }
                }
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::EmbedLookup { ids } => {
                let table = node.inputs[0];
                let tt = self.value(table);
                let mut dt = Tensor::zeros(tt.rows, tt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..tt.cols {
                        dt.data[id * tt.cols + c] += dy.data[r * tt.cols + c];
                    }
                }
                Self::acc_into(grads, table, dt);
            }
            Op::SelectRows { ids } => {
                let x = node.inputs[0];
                let tx = self.value(x);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..tx.cols {
                        dx.data[id * tx.cols + c] += dy.data[r * tx.cols + c];
                    }
                }
                Self::acc_into(grads, x, dx);
            }
            Op::NarrowRows { start } => {
                let x = node.inputs[0];
                let tx = self.value(x);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                dx.data[start * tx.cols..(start + dy.rows) * tx.cols].copy_from_slice(&dy.data);
                Self::acc_into(grads, x, dx);
            }
            Op::ScatterRows { placements } => {
                for (src_idx, rows) in placements.iter().enumerate() {
                    let src = node.inputs[src_idx];
                    if !needs(src) {
                        continue;
                    }
                    let ts = self.value(src);
                    let mut ds = Tensor::zeros(ts.rows, ts.cols);
                    for (r, &dest) in rows.iter().enumerate() {
                        ds.row_mut(r).copy_from_slice(dy.row(dest));
                    }
                    Self::acc_into(grads, src, ds);
                }
            }
            Op::Reshape { in_rows, in_cols } => {
                let d = Tensor::from_vec(*in_rows, *in_cols, dy.data.clone());
                Self::acc_into(grads, node.inputs[0], d);
            }
            Op::PermuteCols { perm } => {
                let mut dx = Tensor::zeros(dy.rows, dy.cols);
                for r in 0..dy.rows {
                    for (j, &p) in perm.iter().enumerate() {
                        dx.data[r * dy.cols + p] += dy.data[r * dy.cols + j];
                    }
                }
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::MeanPoolGroups { group } => {
                let x = node.inputs[0];
                let tx = self.value(x);
                let inv = F::one() / F::from_f64_c(*group as f64);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for r in 0..tx.rows {
                    let o = r / group;
                    for c in 0..tx.cols {
                        dx.data[r * tx.cols + c] = dy.data[o * tx.cols + c] * inv;
                    }
                }
                Self::acc_into(grads, x, dx);
            }
            Op::ConcatCols => {
                let mut off = 0;
                for &inp in &node.inputs {
                    let ti = self.value(inp);
                    if needs(inp) {
                        let mut di = Tensor::zeros(ti.rows, ti.cols);
                        for r in 0..ti.rows {
                            di.row_mut(r)
                                .copy_from_slice(&dy.row(r)[off..off + ti.cols]);
                        }
                        Self::acc_into(grads, inp, di);
                    }
                    off += ti.cols;
                }
            }
            Op::MeanAll => {
                let tx = self.value(node.inputs[0]);
                let g = dy.item() / F::from_f64_c(tx.numel() as f64);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                dx.data.iter_mut().for_each(|v| *v = g);
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::SumAll => {
                let tx = self.value(node.inputs[0]);
                let g = dy.item();
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                dx.data.iter_mut().for_each(|v| *v = g);
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::MeanRowSqnorm => {
                let tx = self.value(node.inputs[0]);
                let g = dy.item() * F::two() / F::from_f64_c(tx.rows as f64);
                let data = tx.data.iter().map(|&v| v * g).collect();
                Self::acc_into(grads, node.inputs[0], Tensor::from_vec(tx.rows, tx.cols, data));
            }
            Op::NormRowsMean { kind, row_norms } => {
                let tx = self.value(node.inputs[0]);
                let g = dy.item() / F::from_f64_c(tx.rows as f64);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for r in 0..tx.rows {
                    let row = tx.row(r);
                    match kind {
                        NormKind::L1 => {
                            for c in 0..tx.cols {
                                let s = if row[c] > F::zero() {
                                    F::one()
                                } else if row[c] < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                };
                                dx.data[r * tx.cols + c] = g * s;
                            }
                        }
                        NormKind::L2 => {
                            // Subgradient 0 at the origin kink.
                            if row_norms[r] > F::zero() {
                                let inv = g / row_norms[r];
                                for c in 0..tx.cols {
                                    dx.data[r * tx.cols + c] = row[c] * inv;
                                }
                            }
                        }
                        NormKind::LInf => {
                            if row_norms[r] > F::zero() {
                                let mut best = 0;
                                for c in 1..tx.cols {
                                    if row[c].abs() > row[best].abs() {
                                        best = c;
                                    }
                                }
                                let s = if row[best] >= F::zero() { F::one() } else { -F::one() };
                                dx.data[r * tx.cols + best] = g * s;
                            }
                        }
                    }
                }
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::ExpectileMean { sigma } => {
                let tx = self.value(node.inputs[0]);
                let g = dy.item() * F::two() / F::from_f64_c(tx.numel() as f64);
                let data = tx
                    .data
                    .iter()
                    .map(|&nu| {
                        let w = if nu < F::zero() { (*sigma - F::one()).abs() } else { *sigma };
                        g * w * nu
                    })
                    .collect();
                Self::acc_into(grads, node.inputs[0], Tensor::from_vec(tx.rows, tx.cols, data));
            }
            Op::SoftmaxCrossEntropy { labels, weights, probs } => {
                let g = dy.item() / F::from_f64_c(labels.len() as f64);
                let mut dx = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dx.data[r * dx.cols + label] -= F::one();
                    let w = weights.as_ref().map(|w| w[r]).unwrap_or_else(F::one);
                    for c in 0..dx.cols {
                        dx.data[r * dx.cols + c] *= g * w;
                    }
                }
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::SelectColsPerRow { ids } => {
                let tx = self.value(node.inputs[0]);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for (r, &c) in ids.iter().enumerate() {
                    dx.data[r * tx.cols + c] = dy.data[r];
                }
                Self::acc_into(grads, node.inputs[0], dx);
            }
            Op::Dropout { mask, keep_inv } => {
                let data = dy
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&d, &m)| d * m * *keep_inv)
                    .collect();
                Self::acc_into(grads, node.inputs[0], Tensor::from_vec(dy.rows, dy.cols, data));
            }
            Op::Mscsa { ctx } => {
                let x = node.inputs[0];
                let n_scales = ctx.scale_count();
                let w_gate = node.inputs[1 + 3 * n_scales];
                let weight_tensors: Vec<[&Tensor<F>; 3]> = (0..n_scales)
                    .map(|s| {
                        [
                            self.value(node.inputs[1 + 3 * s]),
                            self.value(node.inputs[1 + 3 * s + 1]),
                            self.value(node.inputs[1 + 3 * s + 2]),
                        ]
                    })
                    .collect();
                let back = mscsa::backward(ctx, self.value(x), &weight_tensors, self.value(w_gate), dy);
                if needs(x) {
                    Self::acc_into(grads, x, back.dx);
                }
                for (s, [dwq, dwk, dwv]) in back.dweights.into_iter().enumerate() {
                    if needs(node.inputs[1 + 3 * s]) {
                        Self::acc_into(grads, node.inputs[1 + 3 * s], dwq);
                    }
                    if needs(node.inputs[1 + 3 * s + 1]) {
                        Self::acc_into(grads, node.inputs[1 + 3 * s + 1], dwk);
                    }
                    if needs(node.inputs[1 + 3 * s + 2]) {
                        Self::acc_into(grads, node.inputs[1 + 3 * s + 2], dwv);
                    }
                }
                if needs(w_gate) {
                    Self::acc_into(grads, w_gate, back.dw_gate);
                }
            }
        }
    }
}

/// Dense linear layer helper: y = x @ w + b, with w: [in x out], b: [1 x out].
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: VarId, w: VarId, b: VarId) -> VarId {
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

#[cfg(test)]
mod tests;
