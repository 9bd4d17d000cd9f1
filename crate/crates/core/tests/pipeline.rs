//! Every stage end to end on a tiny world: determinism, lineage and the
//! ablation switches.

mod common;

use larr::evalbench::{run_ablation, sweep, EvalReport, SweepParam, Variant};
use larr::pipeline::{
    cache_stage, evaluate, finetune_stage, fusion_stage, gen_data, heldout_perplexity, oracle_metrics, pretrain_stage,
    Frozen, PretrainCorpus, RunConfig,
};
use larr::synthworld::{save_interactions, save_world};

/// Serialized bytes of every artifact of one full run.
fn run_all(cfg: &RunConfig) -> Vec<(String, Vec<u8>)> {
    let ds = gen_data(&cfg.data).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_world(&tmp.path().join("world"), &ds.world).unwrap();
    save_interactions(&tmp.path().join("log.jsonl"), &ds.records).unwrap();
    let mut out = Vec::new();
    for f in ["world/pois.jsonl", "world/users.jsonl", "world/truth.json", "log.jsonl"] {
        out.push((f.to_string(), std::fs::read(tmp.path().join(f)).unwrap()));
    }
    let (lm, _) = pretrain_stage(&ds, cfg, PretrainCorpus::Mixed).unwrap();
    out.push(("lm".into(), lm.encode_checkpoint(serde_json::Value::Null)));
    let (emb, _) = finetune_stage(lm, &ds, cfg).unwrap();
    let frozen = Frozen::Embedder(&emb);
    out.push(("embedder".into(), frozen.checkpoint_bytes()));
    let cache = cache_stage(&frozen, &ds, cfg).unwrap();
    out.push(("cache".into(), cache.encode()));
    let (model, _) = fusion_stage(&ds, Some(&cache), &cfg.fusion).unwrap();
    out.push(("fusion".into(), model.encode_checkpoint()));
    let m = evaluate(&model, &ds, Some(&cache)).unwrap();
    out.push(("metrics".into(), serde_json::to_vec(&m).unwrap()));
    out
}

#[test]
fn every_stage_is_byte_reproducible() {
    let cfg = common::tiny_config(8);
    let a = run_all(&cfg);
    let b = run_all(&cfg);
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between identical runs");
    }
    let c = run_all(&common::tiny_config(9));
    assert_ne!(a[0].1, c[0].1, "a different seed should change the world");
}

#[test]
fn stages_produce_sane_outputs() {
    let cfg = common::tiny_config(10);
    let ds = gen_data(&cfg.data).unwrap();
    assert_eq!(ds.records.len(), cfg.data.n_interactions);
    assert_eq!(ds.train.len() + ds.test.len(), ds.records.len());
    let oracle = oracle_metrics(&ds).unwrap();
    assert!(oracle.ctr_auc > 0.6, "{oracle:?}");
    let (lm, report) = pretrain_stage(&ds, &cfg, PretrainCorpus::Mixed).unwrap();
    assert!(report.final_loss.is_finite());
    assert!(heldout_perplexity(&lm, &ds).unwrap() < ds.vocab.size() as f64);
    let (emb, _) = finetune_stage(lm, &ds, &cfg).unwrap();
    let cache = cache_stage(&Frozen::Embedder(&emb), &ds, &cfg).unwrap();
    let (model, report) = fusion_stage(&ds, Some(&cache), &cfg.fusion).unwrap();
    assert!(report.epochs_run >= 1 && report.best_epoch >= 1);
    let m = evaluate(&model, &ds, Some(&cache)).unwrap();
    for v in [m.ctr_auc, m.ctcvr_auc, m.ctr_gauc, m.ctcvr_gauc] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn ablation_shares_text_artifacts_and_round_trips() {
    let cfg = common::tiny_config(11);
    let variants = [Variant::Ple, Variant::NoFt, Variant::NoAl, Variant::Complete];
    let (report, timings) = run_ablation(&variants, &cfg, &[11, 12]).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.variants.len(), 4);
    let no_al = &report.variants[&Variant::NoAl];
    let complete = &report.variants[&Variant::Complete];
    for (a, b) in no_al.runs.iter().zip(&complete.runs) {
        assert_eq!(a.text_model_digest, b.text_model_digest);
        assert_eq!(a.cache_digest, b.cache_digest);
    }
    let no_ft = &report.variants[&Variant::NoFt];
    assert_ne!(no_ft.runs[0].text_model_digest, complete.runs[0].text_model_digest);
    assert!(report.variants[&Variant::Ple].runs[0].text_model_digest.is_empty());
    assert!(timings.keys().any(|k| k.starts_with("fusion-LARR-PLE")));

    let back = EvalReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.to_tsv().lines().count(), 5);

    let (again, _) = run_ablation(&variants, &cfg, &[11, 12]).unwrap();
    assert_eq!(again.to_json(), report.to_json());
}

#[test]
fn sweep_is_deterministic() {
    let cfg = common::tiny_config(13);
    let ds = gen_data(&cfg.data).unwrap();
    let (lm, _) = pretrain_stage(&ds, &cfg, PretrainCorpus::Mixed).unwrap();
    let cache = cache_stage(&Frozen::Lm(&lm), &ds, &cfg).unwrap();
    let a = sweep(SweepParam::Temperature, &[0.05, 0.5], &ds, &cache, &cfg.fusion).unwrap();
    let b = sweep(SweepParam::Temperature, &[0.05, 0.5], &ds, &cache, &cfg.fusion).unwrap();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.to_tsv().lines().count(), 3);
    let n = sweep(SweepParam::NegativeRatio, &[0.0, 1.0], &ds, &cache, &cfg.fusion).unwrap();
    assert_eq!(n.points.len(), 2);
    assert!(sweep(SweepParam::Temperature, &[], &ds, &cache, &cfg.fusion).is_err());
}
