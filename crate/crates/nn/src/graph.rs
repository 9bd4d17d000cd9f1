//! Tape-based reverse-mode differentiation over a closed set of rank-2 ops.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar loss with respect to every recorded node.

use crate::attention::{self, AttentionSpec};
use crate::error::{NnError, Result};
use crate::gemm::{gemm, View};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupMeanRows {
        src: Var,
        group: usize,
    },
    RowNormalize {
        src: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A graph that rejects NaN/inf inputs and outputs and zero-norm rows in
    /// [`Graph::row_normalize`].
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(NnError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.val(a));
        let (k2, n) = dims2(self.val(b));
        if k != k2 {
            return Err(mismatch("matmul", self.val(a), self.val(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::new(self.val(a).data(), m, k),
            View::new(self.val(b).data(), k, n),
            0.0,
            &mut out,
            n,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.val(a));
        let (n, k2) = dims2(self.val(b));
        if k != k2 {
            return Err(mismatch("matmul_nt", self.val(a), self.val(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::new(self.val(a).data(), m, k),
            View::new(self.val(b).data(), n, k).t(),
            0.0,
            &mut out,
            n,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.val(a));
        let src = self.val(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), "transpose")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.val(a));
        let r = self.val(row);
        if r.rows() != 1 || r.cols() != n {
            return Err(mismatch("add_row", self.val(a), r));
        }
        let r = r.data().to_vec();
        let mut out = self.val(a).data().to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&r)
                .for_each(|(o, b)| *o += b);
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, c), "scale")
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.val(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(
            a,
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    /// Row-wise layer normalization with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.val(x));
        for p in [gain, bias] {
            let t = self.val(p);
            if t.rows() != 1 || t.cols() != n {
                return Err(mismatch("layer_norm", self.val(x), t));
            }
        }
        let src = self.val(x).data();
        let g = self.val(gain).data();
        let b = self.val(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.val(a));
        let mut out = self.val(a).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), "softmax")
    }

    /// Embedding lookup: row `idx[i]` of `src` becomes output row `i`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.val(src));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NnError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let s = self.val(src).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&s[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let m = self.val(first).rows();
        for &p in parts {
            if self.val(p).rows() != m {
                return Err(mismatch("concat_cols", self.val(first), self.val(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(i));
            }
        }
        self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NnError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let n = self.val(first).cols();
        for &p in parts {
            if self.val(p).cols() != n {
                return Err(mismatch("concat_rows", self.val(first), self.val(p)));
            }
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            out.extend_from_slice(self.val(p).data());
            m += self.val(p).rows();
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Mean over consecutive blocks of `group` rows: `[b*group, n] -> [b, n]`.
    pub fn group_mean_rows(&mut self, src: Var, group: usize) -> Result<Var> {
        let (m, n) = dims2(self.val(src));
        if group == 0 || m % group != 0 {
            return Err(NnError::InvalidArgument {
                op: "group_mean_rows",
                msg: format!("{m} rows not divisible into groups of {group}"),
            });
        }
        let b = m / group;
        let s = self.val(src).data();
        let mut out = vec![0.0; b * n];
        for i in 0..m {
            let o = &mut out[(i / group) * n..(i / group + 1) * n];
            o.iter_mut()
                .zip(&s[i * n..(i + 1) * n])
                .for_each(|(o, x)| *o += x / group as f64);
        }
        self.push(
            Tensor::new(vec![b, n], out)?,
            Op::GroupMeanRows { src, group },
            "group_mean_rows",
        )
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, src: Var) -> Result<Var> {
        let (m, n) = dims2(self.val(src));
        let s = self.val(src).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &s[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if self.checked && norm == 0.0 {
                return Err(NnError::InvalidArgument {
                    op: "row_normalize",
                    msg: format!("row {i} has zero norm"),
                });
            }
            let norm = norm.max(NORM_FLOOR);
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::RowNormalize { src, norms },
            "row_normalize",
        )
    }

    /// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.row_normalize(a)?;
        let bn = self.row_normalize(b)?;
        self.matmul_nt(an, bn)
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` as a `[1, 1]`
    /// scalar. Rows with weight zero contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, n) = dims2(self.val(logits));
        if targets.len() != m || weights.len() != m {
            return Err(NnError::InvalidArgument {
                op: "cross_entropy",
                msg: format!(
                    "{m} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(NnError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {t} out of range for {n} classes"),
            });
        }
        let mut probs = self.val(logits).data().to_vec();
        let mut loss = 0.0;
        for i in 0..m {
            let row = &mut probs[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy of `[n, 1]` logits against `{0,1}` labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.val(logits);
        if t.len() != labels.len() || labels.is_empty() {
            return Err(NnError::InvalidArgument {
                op: "bce_with_logits",
                msg: format!("{} logits, {} labels", t.len(), labels.len()),
            });
        }
        let n = labels.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            "bce_with_logits",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Multi-head scaled dot-product attention over `q`, `k`, `v` of shape
    /// `[n_seqs * seq_len, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, if tq.shape() != tk.shape() { tk } else { tv }));
        }
        spec.validate(tq.rows(), tq.cols())?;
        let (out, probs) = attention::forward(&spec, tq.data(), tk.data(), tv.data(), tq.cols());
        let shape = tq.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::Attention { q, k, v, spec, probs },
            "attention",
        )
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[n_seqs, heads, seq_len, seq_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.val(*a));
                let n = self.val(*b).cols();
                let gv = View::new(g, m, n);
                // dA = G B^T, dB = A^T G
                let ga = acc(grads, *a, m * k);
                gemm(1.0, gv, View::new(self.val(*b).data(), k, n).t(), 1.0, ga, k);
                let gb = acc(grads, *b, k * n);
                gemm(1.0, View::new(self.val(*a).data(), m, k).t(), gv, 1.0, gb, n);
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.val(*a));
                let n = self.val(*b).rows();
                let gv = View::new(g, m, n);
                // out = A B^T: dA = G B, dB = G^T A
                let ga = acc(grads, *a, m * k);
                gemm(1.0, gv, View::new(self.val(*b).data(), n, k), 1.0, ga, k);
                let gb = acc(grads, *b, n * k);
                gemm(1.0, gv.t(), View::new(self.val(*a).data(), m, k), 1.0, gb, k);
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.val(*a));
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * vb[j];
                }
                let gb = acc(grads, *b, g.len());
                for j in 0..g.len() {
                    gb[j] += g[j] * va[j];
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                let n = self.val(*row).cols();
                let gr = acc(grads, *row, n);
                for chunk in g.chunks(n) {
                    add_into(gr, chunk, 1.0);
                }
            }
            Op::Scale(a, c) => add_into(acc(grads, *a, g.len()), g, *c),
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    let xv = x[j];
                    let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    ga[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = dims2(self.val(*x));
                let gw = self.val(*gain).data();
                {
                    let gg = acc(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, n);
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk, 1.0);
                    }
                }
                let gx = acc(grads, *x, m * n);
                let nf = n as f64;
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        let d = g[r * n + c] * gw[c];
                        dxhat[c] = d;
                        s1 += d;
                        s2 += d * xhat[r * n + c];
                    }
                    let inv = inv_std[r];
                    for c in 0..n {
                        gx[r * n + c] += inv / nf * (nf * dxhat[c] - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            Op::Softmax(a) => {
                let (m, n) = dims2(out);
                let y = out.data();
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        ga[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let (m, n) = dims2(self.val(*src));
                let gs = acc(grads, *src, m * n);
                for (o, &r) in idx.iter().enumerate() {
                    add_into(&mut gs[r * n..(r + 1) * n], &g[o * n..(o + 1) * n], 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).cols();
                    let gp = acc(grads, p, m * n);
                    for r in 0..m {
                        add_into(
                            &mut gp[r * n..(r + 1) * n],
                            &g[r * total + off..r * total + off + n],
                            1.0,
                        );
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    add_into(acc(grads, p, len), &g[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::GroupMeanRows { src, group } => {
                let (m, n) = dims2(self.val(*src));
                let gs = acc(grads, *src, m * n);
                let s = 1.0 / *group as f64;
                for r in 0..m {
                    let b = r / group;
                    add_into(&mut gs[r * n..(r + 1) * n], &g[b * n..(b + 1) * n], s);
                }
            }
            Op::RowNormalize { src, norms } => {
                let (m, n) = dims2(out);
                let y = out.data();
                let gs = acc(grads, *src, m * n);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gs[r * n + c] += (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (m, n) = dims2(self.val(*logits));
                let gl = acc(grads, *logits, m * n);
                for r in 0..m {
                    let w = weights[r] * g[0];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        gl[r * n + c] += w * probs[r * n + c];
                    }
                    gl[r * n + targets[r]] -= w;
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let x = self.val(*logits).data();
                let n = labels.len() as f64;
                let gl = acc(grads, *logits, labels.len());
                for j in 0..labels.len() {
                    gl[j] += g[0] * (sigmoid(x[j]) - labels[j]) / n;
                }
            }
            Op::Sum(a) => {
                let len = self.val(*a).len();
                acc(grads, *a, len).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let len = self.val(*a).len();
                let s = g[0] / len.max(1) as f64;
                acc(grads, *a, len).iter_mut().for_each(|x| *x += s);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let dim = self.val(*q).cols();
                let len = self.val(*q).len();
                let mut gq = vec![0.0; len];
                let mut gk = vec![0.0; len];
                let mut gv = vec![0.0; len];
                attention::backward(
                    spec,
                    self.val(*q).data(),
                    self.val(*k).data(),
                    self.val(*v).data(),
                    dim,
                    probs,
                    g,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                add_into(acc(grads, *q, len), &gq, 1.0);
                add_into(acc(grads, *k, len), &gk, 1.0);
                add_into(acc(grads, *v, len), &gv, 1.0);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the
    /// loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[1.0, -2.0], &[3.0, 0.5]])).unwrap();
        let l = g.sum(p).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_grad_is_twice_input() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[1.0, -2.0, 0.25]])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(p).unwrap(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn softmax_saturates_to_one_hot() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1e6, 0.0, -3.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v[2] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.3, -7.0, 2.5, 1.0], &[100.0, 99.0, -50.0, 0.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_cosine_is_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.3, -7.0, 2.5], &[1e-3, 4.0, 9.0]])).unwrap();
        let s = g.cosine_similarity(x, x).unwrap();
        let v = g.value(s);
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
        assert!((v.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        let mut g = Graph::new();
        let v = 7;
        let x = g.constant(Tensor::zeros(&[3, v])).unwrap();
        let l = g.cross_entropy(x, &[0, 3, 6], &[1.0, 1.0, 1.0]).unwrap();
        let per_row = g.value(l).item() / 3.0;
        assert!((per_row - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn checked_mode_rejects_nan_and_zero_norm() {
        let mut g = Graph::checked();
        assert!(matches!(
            g.constant(t(&[&[f64::NAN]])),
            Err(NnError::NonFinite(_))
        ));
        let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(g.row_normalize(z).is_err());
        // unchecked graphs floor the norm instead
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(g.row_normalize(z).is_ok());
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.backward(a), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[2.0], &[-1.0]])).unwrap();
        let l = g.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        let expect = (-(sigmoid(2.0)).ln() - (1.0 - sigmoid(-1.0)).ln()) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }
}
