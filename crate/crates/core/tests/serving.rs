//! The serving path never runs the language model.

mod common;

use larr::fusion::{FusionModel, IdSpace};
use larr::lm::{lm_forward_count, LanguageModel};
use larr::pipeline::{cache_stage, gen_data, Frozen};
use larr::evalbench::latency_bench;
use larr::serving::Predictor;

#[test]
fn predictions_do_not_touch_the_language_model() {
    let cfg = common::tiny_config(4);
    let ds = gen_data(&cfg.data).unwrap();
    let lm = LanguageModel::new(cfg.lm.with_vocab(ds.vocab.size()), 1).unwrap();
    let cache = cache_stage(&Frozen::Lm(&lm), &ds, &cfg).unwrap();
    let model = FusionModel::new(cfg.fusion.clone(), IdSpace::of(&ds.world), cache.d_emb, cache.digest_hex()).unwrap();
    let predictor = Predictor::new(&ds.world, Some(&cache), &model).unwrap();

    let before = lm_forward_count();
    let lm_before = lm.forward_count();
    let report = latency_bench(&predictor, &ds.test, 2_000).unwrap();
    assert_eq!(report.lm_forwards, 0);
    assert_eq!(lm_forward_count(), before);
    assert_eq!(lm.forward_count(), lm_before);
    assert!(report.p50_ms <= report.p95_ms && report.p95_ms <= report.p99_ms);
}

#[test]
fn semantic_model_refuses_a_foreign_cache() {
    let cfg = common::tiny_config(4);
    let ds = gen_data(&cfg.data).unwrap();
    let lm = LanguageModel::new(cfg.lm.with_vocab(ds.vocab.size()), 1).unwrap();
    let cache = cache_stage(&Frozen::Lm(&lm), &ds, &cfg).unwrap();
    let model = FusionModel::new(cfg.fusion.clone(), IdSpace::of(&ds.world), cache.d_emb, "00".repeat(32)).unwrap();
    assert!(Predictor::new(&ds.world, Some(&cache), &model).is_err());
    assert!(Predictor::new(&ds.world, None, &model).is_err());
}

#[test]
fn unknown_ids_are_rejected() {
    let cfg = common::tiny_config(4);
    let ds = gen_data(&cfg.data).unwrap();
    let mut c = cfg.fusion.clone();
    c.semantic = false;
    let model = FusionModel::new(c, IdSpace::of(&ds.world), 1, String::new()).unwrap();
    let predictor = Predictor::new(&ds.world, None, &model).unwrap();
    let mut r = ds.test[0].clone();
    assert!(predictor.predict(&r).is_ok());
    r.poi_id.0 = 10_000;
    assert!(predictor.predict(&r).is_err());
}
