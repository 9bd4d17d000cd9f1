//! End-to-end runs of the `larr` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.world.n_pois=24",
    "data.world.n_users=40",
    "data.n_interactions=1500",
    "data.generic_lines=60",
    "lm.layers=1",
    "lm.heads=2",
    "lm.model_dim=16",
    "lm.context_len=256",
    "pretrain.batch_size=8",
    "finetune.steps=2",
    "finetune.batch_size=4",
    "fusion.epochs=2",
    "fusion.batch_size=32",
    "fusion.d_align=16",
    "fusion.user_dim=8",
    "fusion.poi_dim=8",
    "fusion.projection_hidden=16",
    "fusion.hidden=16",
];

fn larr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn larr")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = larr(out, args);
    assert!(
        o.status.success(),
        "larr {args:?} failed ({:?}):\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn gen_data(out: &Path) {
    let mut args = vec!["gen-data", "--seed", "5"];
    for s in TINY {
        args.extend(["--set", s]);
    }
    ok(out, &args);
}

#[test]
fn full_pipeline_and_serving() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    gen_data(out);
    for stage in [&["pretrain"][..], &["finetune"], &["build-cache"], &["train"]] {
        ok(out, stage);
    }
    for f in ["config.toml", "lm.ckpt", "embedder.ckpt", "scene.cache", "fusion.ckpt", "fusion.ckpt.manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    ok(out, &["eval"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    let auc = report["variants"]["LARR-Complete"]["mean"]["ctr_auc"]
        .as_f64()
        .expect("ctr_auc in eval.json");
    assert!((0.0..=1.0).contains(&auc));

    let pred = ok(out, &["predict", "--user", "3", "--poi", "7", "--weather", "1", "--timeslot", "2"]);
    assert!(pred.contains("ctr"), "unexpected predict output: {pred}");
    ok(out, &["bench-serve", "--n", "200"]);
    let bench: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["lm_forwards"], 0);
    ok(out, &["recall", "--region", "0", "--k", "5"]);

    // Unknown ids are rejected rather than served.
    let o = larr(out, &["predict", "--user", "4000", "--poi", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tampered_artifact_fails_lineage_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    gen_data(out);
    ok(out, &["pretrain"]);
    let lm = out.join("lm.ckpt");
    let mut bytes = std::fs::read(&lm).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&lm, bytes).unwrap();
    let o = larr(out, &["build-cache", "--from", "lm"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lm.ckpt"));
}

#[test]
fn missing_inputs_name_the_producing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = larr(tmp.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));

    gen_data(tmp.path());
    let o = larr(tmp.path(), &["train"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bad_usage_and_bad_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(larr(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    let o = larr(tmp.path(), &["gen-data", "--set", "fusion.no_such_key=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn generation_is_reproducible_across_invocations() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_data(a.path());
    gen_data(b.path());
    for f in ["interactions.jsonl", "world/pois.jsonl", "world/users.jsonl", "world/truth.json"] {
        let read = |d: &Path| std::fs::read(d.join("data").join(f)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{f} differs");
    }
}
