//! InfoNCE with in-batch negatives under cosine scoring.

use larr_nn::{Graph, Var};

use crate::error::{invalid, Result};

fn check(g: &Graph, a: Var, p: Var, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return invalid("info_nce", format!("temperature {tau} must be > 0"));
    }
    let (sa, sp) = (g.shape(a), g.shape(p));
    if sa != sp {
        return invalid("info_nce", format!("batch shapes {sa:?} and {sp:?} differ"));
    }
    if sa[0] < 2 {
        return invalid("info_nce", "need at least two pairs for in-batch negatives");
    }
    Ok(sa[0])
}

/// `-(1/B) sum_i log softmax_j(cos(a_i, p_j) / tau)[i]`, optionally with
/// `extra` negatives appended to every row's candidate set.
pub fn info_nce_with_negatives(g: &mut Graph, a: Var, p: Var, extra: Option<Var>, tau: f64) -> Result<Var> {
    let b = check(g, a, p, tau)?;
    let an = g.row_normalize(a)?;
    let pn = g.row_normalize(p)?;
    let mut sim = g.matmul_nt(an, pn)?;
    if let Some(e) = extra {
        let en = g.row_normalize(e)?;
        let s_extra = g.matmul_nt(an, en)?;
        sim = g.concat_cols(&[sim, s_extra])?;
    }
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.cross_entropy(logits, &targets, &vec![1.0 / b as f64; b])?)
}

pub fn info_nce(g: &mut Graph, a: Var, p: Var, tau: f64) -> Result<Var> {
    info_nce_with_negatives(g, a, p, None, tau)
}

/// Mean of both directions: `(L(lhs -> rhs) + L(rhs -> lhs)) / 2`.
pub fn symmetric_info_nce(g: &mut Graph, lhs: Var, rhs: Var, tau: f64) -> Result<Var> {
    let forward = info_nce(g, lhs, rhs, tau)?;
    let backward = info_nce(g, rhs, lhs, tau)?;
    let s = g.add(forward, backward)?;
    Ok(g.scale(s, 0.5)?)
}

/// Symmetric variant where each direction also scores its anchors against
/// the other side's extra negatives.
pub fn symmetric_info_nce_with_negatives(
    g: &mut Graph,
    lhs: Var,
    rhs: Var,
    lhs_extra: Option<Var>,
    rhs_extra: Option<Var>,
    tau: f64,
) -> Result<Var> {
    let forward = info_nce_with_negatives(g, lhs, rhs, rhs_extra, tau)?;
    let backward = info_nce_with_negatives(g, rhs, lhs, lhs_extra, tau)?;
    let s = g.add(forward, backward)?;
    Ok(g.scale(s, 0.5)?)
}
