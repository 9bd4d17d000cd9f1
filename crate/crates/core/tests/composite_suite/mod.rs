//! Composite losses against central finite differences: the contrastive
//! losses with respect to their inputs, and the pretraining, fine-tuning and
//! fusion objectives with respect to model parameters. Each check panics on
//! failure.
#![allow(dead_code)]

use larr::contrastive::{info_nce, info_nce_with_negatives, symmetric_info_nce, symmetric_info_nce_with_negatives};
use larr::embed::{finetune_loss, ContrastiveConfig, Embedder, PairBatch, PairKind};
use larr::fusion::{Example, FusionConfig, FusionModel, IdSpace, SceneSource};
use larr::lm::{LanguageModel, LmConfig};
use larr::scenecache::R;
use larr::textcodec::{KeywordedText, SpecialTokenRegistry, Vocab};
use larr_nn::gradcheck::check;
use larr_nn::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;
/// Entries probed per parameter tensor; large tables are subsampled.
const PROBES: usize = 12;
/// Norm floor for the relative error. Some gradients are exactly zero by
/// construction (attention key biases cancel in the softmax), leaving only
/// finite-difference roundoff of order 1e-10 on the numeric side.
const FLOOR: f64 = 1e-5;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(&[r, c], 1.0, rng)
}

fn input_check(name: &str, build: impl Fn(&mut Graph, &[Var]) -> larr_nn::Result<Var>, shapes: &[(usize, usize)]) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100 * name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| rand_t(&mut rng, r, c)).collect();
        let err = check(&build, &inputs, H).unwrap();
        assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

fn lift(e: larr::LarrError) -> larr_nn::NnError {
    match e {
        larr::LarrError::Nn(n) => n,
        other => panic!("{other}"),
    }
}

pub fn contrastive_losses_wrt_inputs() {
    input_check("info_nce", |g, v| info_nce(g, v[0], v[1], 0.1).map_err(lift), &[(5, 4), (5, 4)]);
    input_check(
        "symmetric_info_nce",
        |g, v| symmetric_info_nce(g, v[0], v[1], 0.5).map_err(lift),
        &[(4, 3), (4, 3)],
    );
    input_check(
        "info_nce_with_negatives",
        |g, v| info_nce_with_negatives(g, v[0], v[1], Some(v[2]), 0.2).map_err(lift),
        &[(3, 4), (3, 4), (6, 4)],
    );
    input_check(
        "symmetric_with_negatives",
        |g, v| symmetric_info_nce_with_negatives(g, v[0], v[1], Some(v[2]), Some(v[3]), 0.3).map_err(lift),
        &[(4, 3), (4, 3), (2, 3), (5, 3)],
    );
}

/// Compares backpropagated parameter gradients with central differences on
/// a random subset of entries of every parameter whose name passes `keep`.
fn param_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    keep: impl Fn(&str) -> bool,
    loss: impl Fn(&M, &mut Graph) -> Var,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut g = Graph::new();
    let l = loss(model, &mut g);
    store(model).zero_grad();
    g.backward_into(l, store(model)).unwrap();
    let params: Vec<_> = store(model)
        .iter()
        .filter(|(_, n, _)| keep(n))
        .map(|(id, n, t)| (id, n.to_string(), t.len()))
        .collect();
    assert!(!params.is_empty());
    let mut worst: f64 = 0.0;
    for (id, name, len) in params {
        let analytic = store(model).grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        idx.truncate(PROBES);
        let mut ana = Vec::new();
        let mut num = Vec::new();
        for j in idx {
            let orig = store(model).value(id).data()[j];
            let eval = |x: f64, model: &mut M| {
                store(model).value_mut(id).data_mut()[j] = x;
                let mut g = Graph::new();
                let l = loss(model, &mut g);
                g.value(l).item()
            };
            let up = eval(orig + H, model);
            let down = eval(orig - H, model);
            store(model).value_mut(id).data_mut()[j] = orig;
            ana.push(analytic[j]);
            num.push((up - down) / (2.0 * H));
        }
        let diff: f64 = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = diff / norm(&ana).max(norm(&num)).max(FLOOR);
        assert!(err.is_finite(), "{name}");
        if err >= TOL {
            eprintln!("{name}: analytic {ana:?} numeric {num:?}");
        }
        worst = worst.max(err);
    }
    worst
}

fn tiny_lm(vocab: usize, seed: u64, rng: &mut ChaCha8Rng) -> LanguageModel {
    let cfg = LmConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        context_len: 48,
        vocab_size: vocab,
        ff_mult: 2,
        mix_ratio: 0.1,
    };
    let mut lm = LanguageModel::new(cfg, seed).unwrap();
    // Replace the zero-initialized head so every parameter is exercised.
    let head = lm.store.id("lm.head.w").unwrap();
    let shape = lm.store.value(head).shape().to_vec();
    *lm.store.value_mut(head) = Tensor::uniform(&shape, 0.3, rng);
    lm
}

pub fn pretraining_loss_wrt_parameters() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lm = tiny_lm(20, seed, &mut rng);
        let seqs: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..rng.random_range(4..12)).map(|_| rng.random_range(1..20)).collect())
            .collect();
        let items: Vec<(Vec<usize>, usize)> = seqs.iter().map(|s| (s.clone(), rng.random_range(1..s.len()))).collect();
        let err = param_check(
            &mut lm,
            |m| &mut m.store,
            |_| true,
            |m, g| {
                let refs: Vec<(&[usize], usize)> = items.iter().map(|(s, st)| (s.as_slice(), *st)).collect();
                m.pretrain_loss(g, &refs).unwrap()
            },
            &mut rng,
        );
        assert!(err < TOL, "pretraining loss instance {seed}: {err:e}");
    }
}

pub fn finetuning_loss_wrt_parameters() {
    let vocab = Vocab::build(["abcdefghij klmnop"], None, SpecialTokenRegistry::standard()).unwrap();
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.random_range(1..6)).map(|_| (b'a' + rng.random_range(0..16u8)) as char).collect()
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let lm = tiny_lm(vocab.size(), seed, &mut rng);
        let mut emb = Embedder::new(lm, 6, seed).unwrap();
        let mut batch = |kind| PairBatch {
            kind,
            lhs: (0..3).map(|_| KeywordedText::new([(2, word(&mut rng)), (3, word(&mut rng))])).collect(),
            rhs: (0..3).map(|_| KeywordedText::new([(0, word(&mut rng)), (1, word(&mut rng))])).collect(),
        };
        let batches = [batch(PairKind::UserUser), batch(PairKind::PoiPoi), batch(PairKind::UserPoi)];
        let cfg = ContrastiveConfig {
            tau: 0.5,
            lambda: [1.0, 0.5, 2.0],
            ..ContrastiveConfig::default()
        };
        let err = param_check(
            &mut emb,
            |m| &mut m.lm.store,
            // The LM head does not take part in embedding.
            |n| !n.starts_with("lm.head"),
            |m, g| finetune_loss(m, g, &vocab, [Some(&batches[0]), Some(&batches[1]), Some(&batches[2])], &cfg).unwrap(),
            &mut rng,
        );
        assert!(err < TOL, "fine-tuning loss instance {seed}: {err:e}");
    }
}

fn random_example(rng: &mut ChaCha8Rng, ids: &IdSpace) -> Example {
    Example {
        user: rng.random_range(0..ids.n_users),
        poi: rng.random_range(0..ids.n_pois),
        weather: rng.random_range(0..ids.n_weather),
        timeslot: rng.random_range(0..ids.n_timeslots),
        cell: rng.random_range(0..ids.n_cells),
        weekend: rng.random_bool(0.5),
        scene: [None; R],
        click: rng.random_bool(0.4) as u8 as f64,
        order: rng.random_bool(0.2) as u8 as f64,
    }
}

pub fn fusion_loss_wrt_parameters() {
    let ids = IdSpace {
        n_users: 6,
        n_pois: 5,
        n_weather: 2,
        n_timeslots: 3,
        n_cells: 4,
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let semantic = seed % 4 != 3;
        let cfg = FusionConfig {
            semantic,
            d_align: 8,
            user_dim: 4,
            poi_dim: 4,
            context_dim: 3,
            hidden: 6,
            projection_hidden: 6,
            encoder_heads: 2,
            beta: [1.0, 0.5],
            tau: 0.3,
            embedding_l2: if seed % 2 == 0 { 0.1 } else { 0.0 },
            fallback: true,
            seed,
            ..FusionConfig::default()
        };
        let d_scene = 4;
        let mut model = FusionModel::new(cfg, ids, d_scene, String::new()).unwrap();
        let batch: Vec<Example> = (0..4).map(|_| random_example(&mut rng, &ids)).collect();
        let rows: Vec<[Option<Vec<f64>>; R]> = (0..batch.len())
            .map(|_| {
                std::array::from_fn(|_| {
                    rng.random_bool(0.9)
                        .then(|| (0..d_scene).map(|_| rng.random_range(-1.0..1.0)).collect())
                })
            })
            .collect();
        let negatives: Vec<(usize, usize)> = if seed % 3 == 0 {
            (0..3).map(|_| (rng.random_range(0..6), rng.random_range(0..5))).collect()
        } else {
            Vec::new()
        };
        let err = param_check(
            &mut model,
            |m| &mut m.store,
            // The input standardization is fitted from data, not trained.
            |n| !n.starts_with("scene.norm"),
            |m, g| m.loss(g, &batch, &SceneSource::Direct(&rows), None, &negatives).unwrap().0,
            &mut rng,
        );
        assert!(err < TOL, "fusion loss instance {seed} (semantic={semantic}): {err:e}");
    }
}

/// Every check with its name.
pub const ALL: &[(&str, fn())] = &[
    ("contrastive_losses_wrt_inputs", contrastive_losses_wrt_inputs),
    ("pretraining_loss_wrt_parameters", pretraining_loss_wrt_parameters),
    ("finetuning_loss_wrt_parameters", finetuning_loss_wrt_parameters),
    ("fusion_loss_wrt_parameters", fusion_loss_wrt_parameters),
];
