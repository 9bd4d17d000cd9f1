use larr_nn::{AttentionSpec, Graph, MaskMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, spec: AttentionSpec) -> (Tensor, Vec<f64>) {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let o = g.attention(qv, kv, vv, spec).unwrap();
    (g.value(o).clone(), g.attention_probs(o).unwrap().to_vec())
}

#[test]
fn causal_single_position_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::uniform(&[1, 4], 1.0, &mut rng);
    let k = Tensor::uniform(&[1, 4], 1.0, &mut rng);
    let v = Tensor::uniform(&[1, 4], 1.0, &mut rng);
    let (o, _) = attend(&q, &k, &v, AttentionSpec::new(1, 1, 2, MaskMode::Causal));
    assert_eq!(o.data(), v.data());
}

#[test]
fn equal_keys_give_uniform_weights_over_unpadded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let k = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]).unwrap();
    let v = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let mask = vec![true, true, false, true, false];
    let spec = AttentionSpec::new(1, 5, 2, MaskMode::Bidirectional).with_key_mask(mask.clone());
    let (_, probs) = attend(&q, &k, &v, spec);
    for row in probs.chunks(5) {
        for (j, p) in row.iter().enumerate() {
            let want = if mask[j] { 1.0 / 3.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_output_ignores_future_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 6;
    let q = Tensor::uniform(&[t, 8], 1.0, &mut rng);
    let k = Tensor::uniform(&[t, 8], 1.0, &mut rng);
    let v = Tensor::uniform(&[t, 8], 1.0, &mut rng);
    let spec = AttentionSpec::new(1, t, 2, MaskMode::Causal);
    let (base, _) = attend(&q, &k, &v, spec.clone());
    for j in 0..t {
        let mut v2 = v.clone();
        let mut k2 = k.clone();
        for c in 0..8 {
            v2.data_mut()[j * 8 + c] += 10.0;
            k2.data_mut()[j * 8 + c] -= 3.0;
        }
        let (o, _) = attend(&q, &k2, &v2, spec.clone());
        for i in 0..j {
            assert_eq!(o.row(i), base.row(i), "position {i} changed by perturbing {j}");
        }
    }
}

#[test]
fn causal_gradient_to_future_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 7;
    let x = Tensor::uniform(&[t, 4], 1.0, &mut rng);
    for s in 0..t {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let o = g
            .attention(xv, xv, xv, AttentionSpec::new(1, t, 2, MaskMode::Causal))
            .unwrap();
        // loss = output row s only
        let mut sel = Tensor::zeros(&[t, 4]);
        sel.data_mut()[s * 4..(s + 1) * 4].iter_mut().for_each(|x| *x = 1.0);
        let w = g.constant(sel).unwrap();
        let p = g.mul(o, w).unwrap();
        let l = g.sum(p).unwrap();
        let gr = g.backward(l).unwrap();
        let gx = gr.wrt(xv).unwrap();
        for future in s + 1..t {
            assert!(gx[future * 4..(future + 1) * 4].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn padding_rows_do_not_affect_valid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let (short, _) = attend(&x, &x, &x, AttentionSpec::new(1, 3, 2, MaskMode::Bidirectional));
    let mut padded = x.data().to_vec();
    padded.extend([9.0; 8]);
    let p = Tensor::new(vec![5, 4], padded).unwrap();
    let spec = AttentionSpec::new(1, 5, 2, MaskMode::Bidirectional)
        .with_key_mask(vec![true, true, true, false, false]);
    let (long, _) = attend(&p, &p, &p, spec);
    for i in 0..3 {
        for (a, b) in short.row(i).iter().zip(long.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
