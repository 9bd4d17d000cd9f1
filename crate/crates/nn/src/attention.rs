//! Multi-head scaled dot-product attention kernels.

use crate::error::{NnError, Result};
use crate::gemm::{gemm, View};
use crate::graph::softmax_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Position `i` attends to positions `<= i`.
    Causal,
    Bidirectional,
}

/// Layout of a padded batch: `n_seqs` sequences of `seq_len` rows each.
///
/// `key_mask[r] == false` marks row `r` as padding; padded keys receive zero
/// attention weight from every query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub mode: MaskMode,
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    pub fn new(n_seqs: usize, seq_len: usize, heads: usize, mode: MaskMode) -> Self {
        Self {
            n_seqs,
            seq_len,
            heads,
            mode,
            key_mask: None,
        }
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    pub(crate) fn validate(&self, rows: usize, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(NnError::InvalidArgument { op: "attention", msg });
        if self.n_seqs * self.seq_len != rows {
            return bad(format!(
                "{} x {} layout does not cover {rows} rows",
                self.n_seqs, self.seq_len
            ));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return bad(format!("dim {dim} not divisible by {} heads", self.heads));
        }
        if let Some(m) = &self.key_mask {
            if m.len() != rows {
                return bad(format!("key mask has {} entries for {rows} rows", m.len()));
            }
        }
        Ok(())
    }

    fn allowed(&self, seq: usize, i: usize, j: usize) -> bool {
        let key_ok = self
            .key_mask
            .as_ref()
            .is_none_or(|m| m[seq * self.seq_len + j]);
        key_ok && (self.mode == MaskMode::Bidirectional || j <= i)
    }
}

fn head_view(data: &[f64], base: usize, t: usize, dh: usize, dim: usize) -> View<'_> {
    View {
        data: &data[base..],
        rows: t,
        cols: dh,
        rs: dim,
        cs: 1,
    }
}

pub(crate) fn forward(
    spec: &AttentionSpec,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let t = spec.seq_len;
    let dh = dim / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; spec.n_seqs * spec.heads * t * t];
    for b in 0..spec.n_seqs {
        for h in 0..spec.heads {
            let base = b * t * dim + h * dh;
            let p = &mut probs[(b * spec.heads + h) * t * t..(b * spec.heads + h + 1) * t * t];
            gemm(
                scale,
                head_view(q, base, t, dh, dim),
                head_view(k, base, t, dh, dim).t(),
                0.0,
                p,
                t,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut any = false;
                for (j, x) in row.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        any = true;
                    } else {
                        *x = f64::NEG_INFINITY;
                    }
                }
                if any {
                    softmax_in_place(row);
                } else {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            gemm(
                1.0,
                View::new(p, t, t),
                head_view(v, base, t, dh, dim),
                0.0,
                &mut out[base..],
                dim,
            );
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &AttentionSpec,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dim: usize,
    probs: &[f64],
    g: &[f64],
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
) {
    let t = spec.seq_len;
    let dh = dim / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ds = vec![0.0; t * t];
    for b in 0..spec.n_seqs {
        for h in 0..spec.heads {
            let base = b * t * dim + h * dh;
            let p = &probs[(b * spec.heads + h) * t * t..(b * spec.heads + h + 1) * t * t];
            let gh = head_view(g, base, t, dh, dim);
            // dV = P^T dO
            gemm(1.0, View::new(p, t, t).t(), gh, 1.0, &mut gv[base..], dim);
            // dP = dO V^T
            gemm(1.0, gh, head_view(v, base, t, dh, dim).t(), 0.0, &mut ds, t);
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut ds[i * t..(i + 1) * t];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(1.0, View::new(&ds, t, t), head_view(k, base, t, dh, dim), 1.0, &mut gq[base..], dim);
            gemm(1.0, View::new(&ds, t, t).t(), head_view(q, base, t, dh, dim), 1.0, &mut gk[base..], dim);
        }
    }
}
