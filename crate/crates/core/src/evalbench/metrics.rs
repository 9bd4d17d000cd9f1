//! Ranking metrics.

use std::collections::BTreeMap;

use crate::error::{invalid, LarrError, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid("auc", "scores and labels differ in length");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("auc", "NaN score");
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LarrError::Undefined("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares the midrank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Impression-weighted mean of per-group AUC over groups with both classes.
pub fn gauc(scores: &[f64], labels: &[u8], groups: &[u64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return invalid("gauc", "inputs differ in length");
    }
    let mut by_group: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &l), &g) in scores.iter().zip(labels).zip(groups) {
        let e = by_group.entry(g).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let mut parts = Vec::with_capacity(by_group.len());
    for (s, l) in by_group.values() {
        match auc(s, l) {
            Ok(a) => parts.push((a, s.len() as f64)),
            Err(LarrError::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Err(LarrError::Undefined("GAUC needs a group with both classes"));
    }
    // Normalizing the weights first (rather than dividing a weighted sum)
    // makes a lone group's weight exactly 1, so GAUC reproduces its AUC.
    let total: f64 = parts.iter().map(|p| p.1).sum();
    Ok(parts.iter().map(|&(a, w)| a * (w / total)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.8, 0.8, 0.6, 0.4], &[1, 0, 1, 0]).unwrap(), 0.625);
    }

    #[test]
    fn single_class_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(LarrError::Undefined(_))));
        assert!(matches!(gauc(&[0.1, 0.2], &[1, 1], &[0, 1]), Err(LarrError::Undefined(_))));
    }

    #[test]
    fn gauc_groups() {
        let s = [0.9, 0.1, 0.2, 0.8, 0.5];
        let l = [1, 0, 0, 1, 1];
        let g = [1, 1, 2, 2, 3];
        assert_eq!(gauc(&s, &l, &g).unwrap(), 1.0);
        assert_eq!(gauc(&s[..2], &l[..2], &g[..2]).unwrap(), auc(&s[..2], &l[..2]).unwrap());
    }
}
