//! `larr`: runs the pipeline stage by stage inside a run directory.
//!
//! Exit codes: 0 success, 2 usage error, 3 contract violation, 4 missing
//! upstream artifact.

mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use larr::embed::Embedder;
use larr::evalbench::{self, latency_bench, run_ablation, sweep, EvalReport, SweepParam, Variant};
use larr::fusion::FusionModel;
use larr::lm::LanguageModel;
use larr::pipeline::{
    cache_stage, evaluate, finetune_stage, fusion_stage, gen_data, heldout_perplexity, pretrain_stage, Dataset,
    Frozen, PretrainCorpus, RunConfig,
};
use larr::scenecache::{EmbeddingCache, VectorSource};
use larr::serving::{request, Predictor};
use larr::synthworld::{load_interactions, load_truth_rows, load_world, save_interactions, save_truth_rows, save_world};
use larr::synthworld::{Cell, Context, PoiId, UserId};
use larr::textcodec::{keyword, KeywordedText};
use larr::LarrError;

use artifacts::{build_id, Manifest, RunDir, CACHE, DATA, EMBEDDER, FUSION, LM};

#[derive(Parser)]
#[command(name = "larr", version, about = "Scene-aware CTR pipeline")]
struct Cli {
    /// Run directory holding the config and every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Config file (TOML); defaults to the run directory's resolved config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; propagated into every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set fusion.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextModel {
    /// The contrastively fine-tuned embedder.
    Embedder,
    /// The pretrained language model (no fine-tuning).
    Lm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and its interaction log.
    GenData,
    /// Pretrain the language model on POI descriptions mixed with generic text.
    Pretrain {
        /// Train on generic text only, with the same budget.
        #[arg(long)]
        generic_only: bool,
    },
    /// Contrastively fine-tune the pretrained model into a text embedder.
    Finetune,
    /// Precompute scene-feature vectors with the frozen text model.
    BuildCache {
        #[arg(long, value_enum, default_value = "embedder")]
        from: TextModel,
    },
    /// Train the fusion model.
    Train {
        /// LARR-Complete, LARR-noAL or LARR-PLE (the upstream artifacts
        /// decide the other variants).
        #[arg(long, default_value = "LARR-Complete")]
        variant: String,
    },
    /// Evaluate the trained model, or run the multi-seed ablation.
    Eval {
        #[arg(long)]
        ablation: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Retrain the fusion stage over a grid of one hyperparameter.
    Sweep {
        #[arg(long, default_value = "temperature")]
        param: String,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.5,1.0")]
        grid: Vec<f64>,
    },
    /// Rank POIs by similarity to a text query.
    Recall {
        /// Free-text query.
        #[arg(long, conflicts_with = "region")]
        query: Option<String>,
        /// Use the planted-region probe query for this region.
        #[arg(long)]
        region: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Measure serving latency from the cache and audit LM invocations.
    BenchServe {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
    /// Score one request.
    Predict {
        #[arg(long)]
        user: u32,
        #[arg(long)]
        poi: u32,
        #[arg(long, default_value_t = 0)]
        weather: usize,
        #[arg(long, default_value_t = 1)]
        timeslot: usize,
        #[arg(long, default_value_t = 0)]
        x: u8,
        #[arg(long, default_value_t = 0)]
        y: u8,
        #[arg(long, default_value_t = 20.0)]
        temperature: f64,
        #[arg(long)]
        weekend: bool,
    },
}

struct Env {
    dir: RunDir,
    cfg: RunConfig,
}

impl Env {
    fn manifest(&self, kind: &str, inputs: &[(&str, &Manifest)]) -> Manifest {
        Manifest {
            kind: kind.into(),
            sha256: String::new(),
            inputs: inputs.iter().map(|(n, m)| (n.to_string(), m.sha256.clone())).collect(),
            config_digest: self.cfg.digest(),
            seed: self.cfg.seed,
            build: build_id(),
            detail: BTreeMap::new(),
        }
    }

    fn dataset(&self) -> Result<(Dataset, Manifest)> {
        let m = self.dir.verify(DATA)?;
        let data_digest = larr::digest::sha256_hex(toml::to_string(&self.cfg.data)?.as_bytes());
        if m.detail.get("data_config").is_some_and(|d| *d != data_digest) {
            return Err(LarrError::InvalidConfig("data settings changed since gen-data; rerun gen-data".into()).into());
        }
        let root = self.dir.path(DATA);
        let world = load_world(&root.join("world"))?;
        let records = load_interactions(&root.join("interactions.jsonl"))?;
        let truth = load_truth_rows(&root.join("truth.jsonl"))?;
        Ok((Dataset::assemble(&self.cfg.data, world, records, truth)?, m))
    }

    fn lm(&self) -> Result<(LanguageModel, Manifest)> {
        let m = self.dir.verify(LM)?;
        Ok((LanguageModel::load(&self.dir.path(LM), "pretrain")?.0, m))
    }

    fn embedder(&self) -> Result<(Embedder, Manifest)> {
        let m = self.dir.verify(EMBEDDER)?;
        let (lm, extra) = LanguageModel::load(&self.dir.path(EMBEDDER), "finetune")?;
        let d = extra["d_emb"]
            .as_u64()
            .ok_or_else(|| LarrError::Corrupt("embedder checkpoint lacks d_emb".into()))?;
        Ok((Embedder::bind(lm, d as usize)?, m))
    }

    fn cache(&self) -> Result<(EmbeddingCache, Manifest)> {
        let m = self.dir.verify(CACHE)?;
        Ok((EmbeddingCache::load(&self.dir.path(CACHE))?, m))
    }

    /// The trained fusion model and, for semantic models, its cache.
    fn fusion(&self) -> Result<(FusionModel, Option<EmbeddingCache>, Manifest)> {
        let m = self.dir.verify(FUSION)?;
        let model = FusionModel::load(&self.dir.path(FUSION))?;
        let cache = if model.is_semantic() {
            let (c, _) = self.cache()?;
            model.check_cache(&c)?;
            Some(c)
        } else {
            None
        };
        Ok((model, cache, m))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.dir.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        log::info!("wrote {}", p.display());
        Ok(())
    }
}

fn gen_data_cmd(env: &Env) -> Result<()> {
    let ds = gen_data(&env.cfg.data)?;
    let root = env.dir.path(DATA);
    save_world(&root.join("world"), &ds.world)?;
    save_interactions(&root.join("interactions.jsonl"), &ds.records)?;
    save_truth_rows(&root.join("truth.jsonl"), &ds.truth)?;
    let mut m = env.manifest("data", &[]);
    m.detail.insert(
        "data_config".into(),
        larr::digest::sha256_hex(toml::to_string(&env.cfg.data)?.as_bytes()),
    );
    let m = env.dir.write_manifest(DATA, m)?;
    println!(
        "data {} pois={} users={} records={} train={} test={}",
        m.sha256,
        ds.world.pois.len(),
        ds.world.users.len(),
        ds.records.len(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

fn pretrain_cmd(env: &Env, generic_only: bool) -> Result<()> {
    let (ds, dm) = env.dataset()?;
    let corpus = if generic_only { PretrainCorpus::GenericOnly } else { PretrainCorpus::Mixed };
    let (lm, report) = pretrain_stage(&ds, &env.cfg, corpus)?;
    let ppl = heldout_perplexity(&lm, &ds)?;
    lm.save(&env.dir.path(LM), serde_json::Value::Null)?;
    let mut m = env.manifest("lm", &[(DATA, &dm)]);
    m.detail.insert("corpus".into(), if generic_only { "generic" } else { "mixed" }.into());
    let m = env.dir.write_manifest(LM, m)?;
    println!("lm {} steps={} final_loss={:.4} heldout_ppl={ppl:.4}", m.sha256, report.steps, report.final_loss);
    Ok(())
}

fn finetune_cmd(env: &Env) -> Result<()> {
    let (ds, dm) = env.dataset()?;
    let (lm, lm_m) = env.lm()?;
    let (emb, report) = finetune_stage(lm, &ds, &env.cfg)?;
    fs::write(env.dir.path(EMBEDDER), Frozen::Embedder(&emb).checkpoint_bytes())?;
    let m = env.dir.write_manifest(EMBEDDER, env.manifest("embedder", &[(DATA, &dm), (LM, &lm_m)]))?;
    println!("embedder {} steps={} final_loss={:.4}", m.sha256, report.steps, report.final_loss);
    Ok(())
}

fn build_cache_cmd(env: &Env, from: TextModel) -> Result<()> {
    let (ds, dm) = env.dataset()?;
    let (cache, input, upstream) = match from {
        TextModel::Embedder => {
            let (emb, m) = env.embedder()?;
            (cache_stage(&Frozen::Embedder(&emb), &ds, &env.cfg)?, EMBEDDER, m)
        }
        TextModel::Lm => {
            let (lm, m) = env.lm()?;
            let mut cfg = env.cfg.clone();
            cfg.cache.source = VectorSource::Hidden;
            (cache_stage(&Frozen::Lm(&lm), &ds, &cfg)?, LM, m)
        }
    };
    cache.save(&env.dir.path(CACHE))?;
    let mut m = env.manifest("scene-cache", &[(DATA, &dm), (input, &upstream)]);
    m.detail.insert("text_model".into(), input.into());
    let m = env.dir.write_manifest(CACHE, m)?;
    println!("cache {} entries={} dim={} model={}", m.sha256, cache.len(), cache.d_emb, cache.digest_hex());
    Ok(())
}

fn train_cmd(env: &Env, variant: &str) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let spec = variant.spec();
    let cfg = spec.apply(&env.cfg);
    let (ds, dm) = env.dataset()?;
    let (model, report, m) = if spec.semantic {
        let (cache, cm) = env.cache()?;
        let (model, report) = fusion_stage(&ds, Some(&cache), &cfg.fusion)?;
        (model, report, env.manifest("fusion", &[(DATA, &dm), (CACHE, &cm)]))
    } else {
        let (model, report) = fusion_stage(&ds, None, &cfg.fusion)?;
        (model, report, env.manifest("fusion", &[(DATA, &dm)]))
    };
    model.save(&env.dir.path(FUSION))?;
    let mut m = m;
    m.detail.insert("variant".into(), variant.name().into());
    let m = env.dir.write_manifest(FUSION, m)?;
    println!(
        "fusion {} variant={variant} epochs={} best_epoch={} valid_auc={:.4}",
        m.sha256,
        report.epochs_run,
        report.best_epoch,
        report.valid_auc.get(report.best_epoch.wrapping_sub(1)).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_cmd(env: &Env, ablation: bool, seeds: &[u64], variants: &[String]) -> Result<()> {
    if ablation {
        let variants: Vec<Variant> = if variants.is_empty() {
            Variant::ALL.to_vec()
        } else {
            variants.iter().map(|v| Variant::parse(v)).collect::<larr::Result<_>>()?
        };
        let (report, timings) = run_ablation(&variants, &env.cfg, seeds)?;
        env.write("ablation.json", &(report.to_json() + "\n"))?;
        env.write("ablation.tsv", &report.to_tsv())?;
        env.write("ablation.timings.tsv", &timings_tsv(&timings))?;
        print!("{}", report.to_tsv());
        if !report.failures.is_empty() {
            bail!(LarrError::Invalid {
                op: "eval",
                msg: format!("{} variant(s) failed", report.failures.len()),
            });
        }
        return Ok(());
    }
    let t = Instant::now();
    let (ds, _) = env.dataset()?;
    let (model, cache, m) = env.fusion()?;
    let metrics = evaluate(&model, &ds, cache.as_ref())?;
    let variant = Variant::parse(m.detail.get("variant").map(String::as_str).unwrap_or("LARR-Complete"))?;
    let (mean, spread) = evalbench::ablation::summarize(&[metrics]);
    let report = EvalReport {
        seeds: vec![env.cfg.seed],
        config_digest: m.config_digest.clone(),
        variants: [(
            variant,
            evalbench::ablation::VariantResult {
                runs: vec![evalbench::ablation::SeedResult {
                    seed: env.cfg.seed,
                    metrics,
                    text_model_digest: cache.as_ref().map(|c| c.digest_hex()).unwrap_or_default(),
                    cache_digest: m.inputs.get(CACHE).cloned().unwrap_or_default(),
                }],
                mean,
                spread,
            },
        )]
        .into(),
        failures: BTreeMap::new(),
    };
    env.write("eval.json", &(report.to_json() + "\n"))?;
    env.write("eval.tsv", &report.to_tsv())?;
    env.write("eval.timings.tsv", &timings_tsv(&[("eval".to_string(), t.elapsed().as_secs_f64())].into()))?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn timings_tsv(t: &evalbench::Timings) -> String {
    let mut out = String::from("stage\tseconds\n");
    for (k, v) in t {
        out.push_str(&format!("{k}\t{v:.3}\n"));
    }
    out
}

fn sweep_cmd(env: &Env, param: &str, grid: &[f64]) -> Result<()> {
    let param = SweepParam::parse(param)?;
    let (ds, _) = env.dataset()?;
    let (cache, _) = env.cache()?;
    let curve = sweep(param, grid, &ds, &cache, &env.cfg.fusion)?;
    env.write(&format!("sweep-{param}.tsv"), &curve.to_tsv())?;
    env.write(&format!("sweep-{param}.json"), &(serde_json::to_string_pretty(&curve)? + "\n"))?;
    print!("{}", curve.to_tsv());
    Ok(())
}

fn recall_cmd(env: &Env, query: Option<&str>, region: Option<usize>, k: usize) -> Result<()> {
    let (ds, _) = env.dataset()?;
    let (emb, _) = env.embedder()?;
    let report = match (query, region) {
        (_, Some(r)) => evalbench::region_probe(&ds.world, &emb, &ds.vocab, &ds.pois, r, k)?,
        (Some(q), None) => {
            let text = KeywordedText::new([(keyword::INTRO, q.to_string())]);
            let hits = evalbench::recall_topk(&emb, &ds.vocab, &ds.pois, &text, k)?
                .into_iter()
                .map(|(poi, score)| evalbench::recall::RecallHit {
                    poi,
                    score,
                    region: ds.world.config.region_of(ds.world.pois[poi].location),
                })
                .collect();
            evalbench::RecallReport {
                query: q.to_string(),
                region: usize::MAX,
                hits,
                in_region: 0,
            }
        }
        (None, None) => bail!(clap::Error::raw(
            clap::error::ErrorKind::MissingRequiredArgument,
            "recall needs --query or --region\n"
        )),
    };
    for (rank, h) in report.hits.iter().enumerate() {
        println!(
            "{}\t{}\t{:.6}\tregion={}\t{}",
            rank + 1,
            h.poi,
            h.score,
            h.region,
            ds.world.pois[h.poi].name
        );
    }
    if region.is_some() {
        println!("in_region={}/{}", report.in_region, report.hits.len());
    }
    env.write("recall.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

fn bench_cmd(env: &Env, n: usize) -> Result<()> {
    let (ds, _) = env.dataset()?;
    let (model, cache, _) = env.fusion()?;
    let predictor = Predictor::new(&ds.world, cache.as_ref(), &model)?;
    let report = latency_bench(&predictor, &ds.test, n)?;
    println!(
        "requests={} p50_ms={:.4} p95_ms={:.4} p99_ms={:.4} max_ms={:.4} lm_forwards={}",
        report.requests, report.p50_ms, report.p95_ms, report.p99_ms, report.max_ms, report.lm_forwards
    );
    env.write("bench.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict_cmd(env: &Env, user: u32, poi: u32, weather: usize, timeslot: usize, cell: Cell, temperature: f64, weekend: bool) -> Result<()> {
    let (ds, _) = env.dataset()?;
    let (model, cache, _) = env.fusion()?;
    let predictor = Predictor::new(&ds.world, cache.as_ref(), &model)?;
    let ctx = Context {
        weather,
        timeslot,
        cell,
        temperature,
        weekend,
    };
    let (ctr, ctcvr) = predictor.predict(&request(UserId(user), PoiId(poi), ctx))?;
    println!("p_ctr={ctr:.6} p_ctcvr={ctcvr:.6}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let dir = RunDir::new(&cli.out)?;
    let stored = dir.path("config.toml");
    let is_gen = matches!(cli.command, Command::GenData);
    let cfg = config::resolve(cli.config.as_deref(), &stored, is_gen, cli.seed, &cli.overrides)?;
    persist_config(&dir, &cfg)?;
    let env = Env { dir, cfg };
    match cli.command {
        Command::GenData => gen_data_cmd(&env),
        Command::Pretrain { generic_only } => pretrain_cmd(&env, generic_only),
        Command::Finetune => finetune_cmd(&env),
        Command::BuildCache { from } => build_cache_cmd(&env, from),
        Command::Train { variant } => train_cmd(&env, &variant),
        Command::Eval {
            ablation,
            seeds,
            variants,
        } => eval_cmd(&env, ablation, &seeds, &variants),
        Command::Sweep { param, grid } => sweep_cmd(&env, &param, &grid),
        Command::Recall { query, region, k } => recall_cmd(&env, query.as_deref(), region, k),
        Command::BenchServe { n } => bench_cmd(&env, n),
        Command::Predict {
            user,
            poi,
            weather,
            timeslot,
            x,
            y,
            temperature,
            weekend,
        } => predict_cmd(&env, user, poi, weather, timeslot, Cell { x, y }, temperature, weekend),
    }
}

/// Writes the resolved config and the run identity next to the artifacts.
fn persist_config(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.path("config.toml"), cfg.to_toml())?;
    let run = serde_json::json!({
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "build": build_id(),
    });
    fs::write(dir.path("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<clap::Error>().is_some()) {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<LarrError>()) {
        Some(LarrError::MissingArtifact { .. }) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

