//! No LM output may depend on a later input position.

use larr::lm::{LanguageModel, LmConfig};
use larr_nn::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> LanguageModel {
    let cfg = LmConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        context_len: 32,
        vocab_size: 64,
        ff_mult: 2,
        mix_ratio: 0.1,
    };
    LanguageModel::new(cfg, seed).unwrap()
}

/// Gradient rows of `lm.pos_emb` and of the token-embedding rows used at each
/// position, for a random readout of the outputs at position `t` only.
fn position_grads(lm: &LanguageModel, seqs: &[Vec<usize>], t: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let fwd = lm.forward(&mut g, &refs).unwrap();
    let logits = lm.logits(&mut g, fwd.hidden).unwrap();
    let d = g.shape(fwd.hidden)[1];
    let v = g.shape(logits)[1];
    let rows: Vec<usize> = (0..seqs.len()).filter(|&i| t < seqs[i].len()).map(|i| fwd.row(i, t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = g.gather_rows(fwd.hidden, &rows).unwrap();
    let l = g.gather_rows(logits, &rows).unwrap();
    let wh = g.constant(Tensor::uniform(&[rows.len(), d], 1.0, &mut rng)).unwrap();
    let wl = g.constant(Tensor::uniform(&[rows.len(), v], 1.0, &mut rng)).unwrap();
    let a = g.mul(h, wh).unwrap();
    let b = g.mul(l, wl).unwrap();
    let a = g.sum(a).unwrap();
    let b = g.sum(b).unwrap();
    let loss = g.add(a, b).unwrap();
    let mut store = lm.store.clone();
    g.backward_into(loss, &mut store).unwrap();
    let pos = store.grad(store.id("lm.pos_emb").unwrap()).unwrap().to_vec();
    let tok = store.grad(store.id("lm.tok_emb").unwrap()).unwrap().to_vec();
    let split = |v: Vec<f64>| v.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
    (split(pos), split(tok))
}

#[test]
fn future_positions_get_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..12u64 {
        let mut lm = model(case);
        // A random head so logits depend on the hidden state.
        let head = lm.store.id("lm.head.w").unwrap();
        let shape = lm.store.value(head).shape().to_vec();
        *lm.store.value_mut(head) = Tensor::uniform(&shape, 0.5, &mut rng);

        let len = rng.random_range(4..=32);
        // Distinct tokens so each embedding row belongs to one position.
        let mut ids: Vec<usize> = (4..64).collect();
        ids.shuffle(&mut rng);
        let seq: Vec<usize> = ids[..len].to_vec();
        let shorter: Vec<usize> = seq[..rng.random_range(2..=len)].to_vec();
        let seqs = vec![seq.clone(), shorter];
        for t in [0, len / 2, len - 1] {
            let (pos, tok) = position_grads(&lm, &seqs, t, case * 31 + t as u64);
            for s in 0..32 {
                let zero = pos[s].iter().all(|&x| x == 0.0);
                if s > t {
                    assert!(zero, "case {case}: output {t} depends on position {s}");
                } else {
                    assert!(!zero, "case {case}: output {t} ignores position {s}");
                }
            }
            for (s, &tokid) in seq.iter().enumerate().skip(t + 1) {
                assert!(
                    tok[tokid].iter().all(|&x| x == 0.0),
                    "case {case}: output {t} depends on the token at {s}"
                );
            }
        }
    }
}
