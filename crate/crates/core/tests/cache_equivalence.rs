//! Cached scene vectors equal fresh extractions, and the serving path equals
//! the cache-bypass path.

mod common;

use larr::lm::LanguageModel;
use larr::pipeline::{cache_stage, gen_data, Frozen};
use larr::fusion::{FusionModel, IdSpace};
use larr::scenecache::VectorSource;
use larr::serving::Predictor;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cache_matches_fresh_forward_and_bypass_matches_serving() {
    let cfg = common::tiny_config(3);
    let ds = gen_data(&cfg.data).unwrap();
    let lm = LanguageModel::new(cfg.lm.with_vocab(ds.vocab.size()), 5).unwrap();
    let frozen = Frozen::Lm(&lm);
    let cache = cache_stage(&frozen, &ds, &cfg).unwrap();
    let ex = frozen.extractor(&ds.vocab, VectorSource::Hidden).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let keys: Vec<_> = cache.keys().choose_multiple(&mut rng, 100).cloned().collect();
    assert_eq!(keys.len(), 100.min(cache.len()));
    for k in &keys {
        let fresh = ex.extract_feature_embedding(&k.text, k.index).unwrap();
        let cached = cache.lookup(k).unwrap();
        let worst = fresh.iter().zip(cached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "feature {} `{}` differs by {worst:e}", k.index, k.text);
    }

    let mut model = FusionModel::new(cfg.fusion.clone(), IdSpace::of(&ds.world), cache.d_emb, cache.digest_hex()).unwrap();
    model.fit_scene_normalizer(&cache).unwrap();
    let predictor = Predictor::new(&ds.world, Some(&cache), &model).unwrap();
    for r in ds.test.iter().take(40) {
        let (a, b) = predictor.predict(r).unwrap();
        let (c, d) = predictor.predict_bypass(&ex, r).unwrap();
        assert!((a - c).abs() < 1e-5 && (b - d).abs() < 1e-5, "{a} {b} vs {c} {d}");
    }
}
