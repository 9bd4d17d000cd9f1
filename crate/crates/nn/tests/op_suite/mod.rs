//! Finite-difference checks for every differentiable op, 20 random instances
//! each, fp64, central step 1e-5. Each check panics on failure.
#![allow(dead_code)]

use larr_nn::gradcheck::check;
use larr_nn::layers::{Builder, Linear, TransformerBlock};
use larr_nn::{AttentionSpec, Graph, MaskMode, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(&[r, c], 1.0, rng)
}

/// Random readout so every output entry influences the scalar loss.
fn readout(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = g.constant(Tensor::uniform(&shape, 1.0, &mut rng))?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn run<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var], u64) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs = make(&mut rng);
        let err = check(|g, v| build(g, v, seed), &inputs, H).unwrap();
        assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

pub fn matmul_family() {
    run(
        "matmul",
        |r| {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            vec![rand_t(r, m, k), rand_t(r, k, n)]
        },
        |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, s)
        },
    );
    run(
        "matmul_nt",
        |r| {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            vec![rand_t(r, m, k), rand_t(r, n, k)]
        },
        |g, v, s| {
            let y = g.matmul_nt(v[0], v[1])?;
            readout(g, y, s)
        },
    );
    run(
        "transpose",
        |r| vec![rand_t(r, 3, 4)],
        |g, v, s| {
            let y = g.transpose(v[0])?;
            readout(g, y, s)
        },
    );
}

pub fn elementwise_ops() {
    let pair = |r: &mut ChaCha8Rng| vec![rand_t(r, 3, 4), rand_t(r, 3, 4)];
    run("add", pair, |g, v, s| {
        let y = g.add(v[0], v[1])?;
        readout(g, y, s)
    });
    run("sub", pair, |g, v, s| {
        let y = g.sub(v[0], v[1])?;
        readout(g, y, s)
    });
    run("mul", pair, |g, v, s| {
        let y = g.mul(v[0], v[1])?;
        readout(g, y, s)
    });
    run("add_row", |r| vec![rand_t(r, 3, 4), rand_t(r, 1, 4)], |g, v, s| {
        let y = g.add_row(v[0], v[1])?;
        readout(g, y, s)
    });
    run("scale", |r| vec![rand_t(r, 2, 5)], |g, v, s| {
        let y = g.scale(v[0], -1.7)?;
        readout(g, y, s)
    });
    run("gelu", |r| vec![Tensor::uniform(&[3, 5], 3.0, r)], |g, v, s| {
        let y = g.gelu(v[0])?;
        readout(g, y, s)
    });
    run("tanh", |r| vec![Tensor::uniform(&[3, 5], 2.0, r)], |g, v, s| {
        let y = g.tanh(v[0])?;
        readout(g, y, s)
    });
    // keep inputs away from the kink
    run(
        "relu",
        |r| {
            let mut t = rand_t(r, 3, 5);
            t.data_mut().iter_mut().for_each(|x| {
                if x.abs() < 0.05 {
                    *x += 0.1
                }
            });
            vec![t]
        },
        |g, v, s| {
            let y = g.relu(v[0])?;
            readout(g, y, s)
        },
    );
}

pub fn normalization_and_softmax() {
    run(
        "layer_norm",
        |r| vec![Tensor::uniform(&[3, 6], 2.0, r), rand_t(r, 1, 6), rand_t(r, 1, 6)],
        |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            readout(g, y, s)
        },
    );
    run("softmax", |r| vec![Tensor::uniform(&[3, 5], 3.0, r)], |g, v, s| {
        let y = g.softmax_rows(v[0])?;
        readout(g, y, s)
    });
    run("row_normalize", |r| vec![rand_t(r, 4, 3)], |g, v, s| {
        let y = g.row_normalize(v[0])?;
        readout(g, y, s)
    });
    run(
        "cosine_similarity",
        |r| vec![rand_t(r, 3, 4), rand_t(r, 2, 4)],
        |g, v, s| {
            let y = g.cosine_similarity(v[0], v[1])?;
            readout(g, y, s)
        },
    );
}

pub fn structural_ops() {
    run("gather_rows", |r| vec![rand_t(r, 5, 3)], |g, v, s| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
        readout(g, y, s)
    });
    run(
        "concat_cols",
        |r| vec![rand_t(r, 3, 2), rand_t(r, 3, 4)],
        |g, v, s| {
            let y = g.concat_cols(&[v[0], v[1], v[0]])?;
            readout(g, y, s)
        },
    );
    run(
        "concat_rows",
        |r| vec![rand_t(r, 1, 3), rand_t(r, 4, 3)],
        |g, v, s| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            readout(g, y, s)
        },
    );
    run("group_mean_rows", |r| vec![rand_t(r, 6, 3)], |g, v, s| {
        let y = g.group_mean_rows(v[0], 3)?;
        readout(g, y, s)
    });
    run("mean", |r| vec![rand_t(r, 3, 3)], |g, v, _| {
        let y = g.mul(v[0], v[0])?;
        g.mean(y)
    });
}

pub fn losses() {
    run("cross_entropy", |r| vec![Tensor::uniform(&[4, 6], 3.0, r)], |g, v, _| {
        g.cross_entropy(v[0], &[0, 5, 2, 2], &[1.0, 0.5, 0.0, 2.0])
    });
    run("bce_with_logits", |r| vec![Tensor::uniform(&[5, 1], 4.0, r)], |g, v, _| {
        g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0])
    });
}

pub fn attention_both_modes_with_padding() {
    for mode in [MaskMode::Causal, MaskMode::Bidirectional] {
        run(
            if mode == MaskMode::Causal { "attn_causal" } else { "attn_bidir" },
            |r| (0..3).map(|_| Tensor::uniform(&[8, 6], 1.5, r)).collect(),
            |g, v, s| {
                let spec = AttentionSpec::new(2, 4, 2, mode)
                    .with_key_mask(vec![true, true, true, false, true, true, true, true]);
                let y = g.attention(v[0], v[1], v[2], spec)?;
                readout(g, y, s)
            },
        );
    }
}

pub fn random_two_layer_network() {
    run(
        "mlp",
        |r| vec![rand_t(r, 4, 5), rand_t(r, 5, 7), rand_t(r, 1, 7), rand_t(r, 7, 3)],
        |g, v, s| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h)?;
            let y = g.matmul(h, v[3])?;
            let _ = s;
            g.cross_entropy(y, &[0, 1, 2, 1], &[0.25; 4])
        },
    );
}

/// Gradients through a full parameterized block, checked parameter by
/// parameter via the store.
pub fn transformer_block_params() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut Builder::fresh(&mut store, &mut rng), "b", 4, 2).unwrap();
        let head = Linear::new(&mut Builder::fresh(&mut store, &mut rng), "head", 4, 3, true)
            .unwrap();
        let x = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let spec = AttentionSpec::new(2, 3, 2, MaskMode::Causal);
        let loss_of = |store: &ParamStore| -> (Graph, Var) {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let h = block.forward(&mut g, store, xv, &spec).unwrap();
            let y = head.forward(&mut g, store, h).unwrap();
            let l = g.cross_entropy(y, &[0, 1, 2, 2, 1, 0], &[1.0; 6]).unwrap();
            (g, l)
        };
        let (g, l) = loss_of(&store);
        let mut grads = store.clone();
        grads.zero_grad();
        g.backward_into(l, &mut grads).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let ana = grads.grad(id).unwrap().to_vec();
            let mut num = vec![0.0; ana.len()];
            for j in 0..ana.len() {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[j] += H;
                let (g1, l1) = loss_of(&s);
                s.value_mut(id).data_mut()[j] -= 2.0 * H;
                let (g2, l2) = loss_of(&s);
                num[j] = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * H);
            }
            let err = larr_nn::gradcheck::relative_error(&ana, &num);
            assert!(err < TOL, "param {} seed {seed}: {err:e}", store.name(id));
        }
    }
}

/// Every check with its name.
pub const ALL: &[(&str, fn())] = &[
    ("matmul_family", matmul_family),
    ("elementwise_ops", elementwise_ops),
    ("normalization_and_softmax", normalization_and_softmax),
    ("structural_ops", structural_ops),
    ("losses", losses),
    ("attention_both_modes_with_padding", attention_both_modes_with_padding),
    ("random_two_layer_network", random_two_layer_network),
    ("transformer_block_params", transformer_block_params),
];
