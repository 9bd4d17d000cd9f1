//! Ablation variants of the full model and their multi-seed runner.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{LarrError, Result};
use crate::lm::LanguageModel;
use crate::pipeline::{
    cache_stage, evaluate, finetune_stage, fusion_stage, gen_data, pretrain_stage, Dataset, Frozen, Metrics,
    PretrainCorpus, RunConfig,
};
use crate::scenecache::{model_digest, EmbeddingCache, VectorSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LARR-PLE")]
    Ple,
    #[serde(rename = "LARR-noCPT")]
    NoCpt,
    #[serde(rename = "LARR-noFT")]
    NoFt,
    #[serde(rename = "LARR-noAL")]
    NoAl,
    #[serde(rename = "LARR-Complete")]
    Complete,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ple, Variant::NoCpt, Variant::NoFt, Variant::NoAl, Variant::Complete];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ple => "LARR-PLE",
            Variant::NoCpt => "LARR-noCPT",
            Variant::NoFt => "LARR-noFT",
            Variant::NoAl => "LARR-noAL",
            Variant::Complete => "LARR-Complete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.name()[5..].eq_ignore_ascii_case(s))
            .ok_or_else(|| LarrError::InvalidConfig(format!("unknown variant `{s}`")))
    }

    pub fn spec(self) -> VariantSpec {
        let on = VariantSpec {
            variant: self,
            continual_pretrain: true,
            finetune: true,
            alignment: true,
            semantic: true,
        };
        match self {
            Variant::Ple => VariantSpec {
                continual_pretrain: false,
                finetune: false,
                alignment: false,
                semantic: false,
                ..on
            },
            Variant::NoCpt => VariantSpec {
                continual_pretrain: false,
                ..on
            },
            Variant::NoFt => VariantSpec { finetune: false, ..on },
            Variant::NoAl => VariantSpec { alignment: false, ..on },
            Variant::Complete => on,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage switches of a variant. Without continual pretraining the text
/// model is pretrained on generic text only; without fine-tuning the scene
/// cache is read from the pretrained model's hidden states; without
/// alignment the scene vector is still concatenated into the tower but the
/// alignment loss weight is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    pub continual_pretrain: bool,
    pub finetune: bool,
    pub alignment: bool,
    pub semantic: bool,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        if *self != self.variant.spec() {
            return Err(LarrError::InvalidConfig(format!("switches inconsistent with {}", self.variant)));
        }
        Ok(())
    }

    /// The fusion stage configuration for this variant.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.fusion.semantic = self.semantic;
        if !self.alignment {
            cfg.fusion.beta[1] = 0.0;
        }
        cfg
    }
}

/// One variant on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    /// Digest of the frozen text model behind the scene cache (empty for the
    /// collaborative-only variant).
    pub text_model_digest: String,
    pub cache_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub runs: Vec<SeedResult>,
    pub mean: Metrics,
    pub spread: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub variants: BTreeMap<Variant, VariantResult>,
    /// Variants whose pipeline failed, with the error.
    pub failures: BTreeMap<Variant, String>,
}

/// Wall-clock seconds per `variant/seed` and per shared stage; kept apart from
/// [`EvalReport`] so the report itself is reproducible byte for byte.
pub type Timings = BTreeMap<String, f64>;

fn metric_fold(ms: &[Metrics], f: impl Fn(&[f64]) -> f64) -> Metrics {
    let col = |g: fn(&Metrics) -> f64| f(&ms.iter().map(g).collect::<Vec<_>>());
    Metrics {
        ctr_auc: col(|m| m.ctr_auc),
        ctcvr_auc: col(|m| m.ctcvr_auc),
        ctr_gauc: col(|m| m.ctr_gauc),
        ctcvr_gauc: col(|m| m.ctcvr_gauc),
    }
}

/// Mean and population standard deviation of each metric.
pub fn summarize(ms: &[Metrics]) -> (Metrics, Metrics) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    (metric_fold(ms, mean), metric_fold(ms, sd))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Tab-separated table: one row per variant with means and spreads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "variant\tseeds\tctr_auc\tctr_auc_sd\tctcvr_auc\tctcvr_auc_sd\tctr_gauc\tctr_gauc_sd\tctcvr_gauc\tctcvr_gauc_sd\n",
        );
        for (v, r) in &self.variants {
            let (m, s) = (&r.mean, &r.spread);
            out.push_str(&format!(
                "{v}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.runs.len(),
                m.ctr_auc,
                s.ctr_auc,
                m.ctcvr_auc,
                s.ctcvr_auc,
                m.ctr_gauc,
                s.ctr_gauc,
                m.ctcvr_gauc,
                s.ctcvr_gauc
            ));
        }
        for (v, e) in &self.failures {
            out.push_str(&format!("{v}\tFAILED\t{}\n", e.replace(['\t', '\n'], " ")));
        }
        out
    }
}

/// Text-model artifacts shared between variants within one seed, built on
/// first use.
struct SeedArtifacts<'a> {
    ds: &'a Dataset,
    cfg: &'a RunConfig,
    timings: &'a mut Timings,
    cpt: Option<Result<LanguageModel, String>>,
    generic: Option<Result<LanguageModel, String>>,
    embedders: BTreeMap<bool, Result<Embedder, String>>,
    caches: BTreeMap<(bool, bool), Result<(EmbeddingCache, String), String>>,
}

fn timed<T>(timings: &mut Timings, key: String, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    timings.insert(key, t.elapsed().as_secs_f64());
    out
}

impl SeedArtifacts<'_> {
    fn lm(&mut self, continual: bool) -> Result<&LanguageModel, String> {
        let (slot, corpus, name) = if continual {
            (&mut self.cpt, PretrainCorpus::Mixed, "pretrain")
        } else {
            (&mut self.generic, PretrainCorpus::GenericOnly, "pretrain-generic")
        };
        if slot.is_none() {
            let key = format!("{name}/{}", self.cfg.seed);
            let (ds, cfg) = (self.ds, self.cfg);
            let r = timed(self.timings, key, || pretrain_stage(ds, cfg, corpus));
            *slot = Some(r.map(|(lm, _)| lm).map_err(|e| e.to_string()));
        }
        slot.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }

    fn embedder(&mut self, continual: bool) -> Result<&Embedder, String> {
        if !self.embedders.contains_key(&continual) {
            let lm = self.lm(continual)?.clone();
            let key = format!("finetune{}/{}", if continual { "" } else { "-generic" }, self.cfg.seed);
            let (ds, cfg) = (self.ds, self.cfg);
            let r = timed(self.timings, key, || finetune_stage(lm, ds, cfg));
            self.embedders.insert(continual, r.map(|(e, _)| e).map_err(|e| e.to_string()));
        }
        self.embedders[&continual].as_ref().map_err(Clone::clone)
    }

    /// The scene cache and the digest of its text model.
    fn cache(&mut self, continual: bool, finetuned: bool) -> Result<&(EmbeddingCache, String), String> {
        if !self.caches.contains_key(&(continual, finetuned)) {
            let key = format!("cache-{}-{}/{}", continual as u8, finetuned as u8, self.cfg.seed);
            let r = if finetuned {
                self.embedder(continual)?;
                let emb = self.embedders[&continual].as_ref().unwrap();
                let frozen = Frozen::Embedder(emb);
                build(self.timings, key, &frozen, self.ds, self.cfg)
            } else {
                self.lm(continual)?;
                let lm = if continual { &self.cpt } else { &self.generic };
                let frozen = Frozen::Lm(lm.as_ref().unwrap().as_ref().unwrap());
                let mut cfg = self.cfg.clone();
                cfg.cache.source = VectorSource::Hidden;
                build(self.timings, key, &frozen, self.ds, &cfg)
            };
            self.caches.insert((continual, finetuned), r);
        }
        self.caches[&(continual, finetuned)].as_ref().map_err(Clone::clone)
    }
}

fn build(
    timings: &mut Timings,
    key: String,
    frozen: &Frozen,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(EmbeddingCache, String), String> {
    let digest = hex::encode(model_digest(&frozen.checkpoint_bytes()));
    timed(timings, key, || cache_stage(frozen, ds, cfg))
        .map(|c| (c, digest))
        .map_err(|e| e.to_string())
}

fn run_variant(art: &mut SeedArtifacts, spec: &VariantSpec) -> Result<SeedResult, String> {
    let cfg = spec.apply(art.cfg);
    let key = (spec.continual_pretrain, spec.finetune);
    if spec.semantic {
        art.cache(key.0, key.1)?;
    }
    let (cache, text_model_digest) = match (spec.semantic, art.caches.get(&key)) {
        (true, Some(Ok((c, d)))) => (Some(c), d.clone()),
        _ => (None, String::new()),
    };
    let ds = art.ds;
    let key = format!("fusion-{}/{}", spec.variant, cfg.seed);
    let metrics = timed(art.timings, key, || -> Result<Metrics> {
        let (model, _) = fusion_stage(ds, cache, &cfg.fusion)?;
        evaluate(&model, ds, cache)
    })
    .map_err(|e| e.to_string())?;
    Ok(SeedResult {
        seed: cfg.seed,
        metrics,
        text_model_digest,
        cache_digest: cache.map(|c| c.digest_hex()).unwrap_or_default(),
    })
}

/// Runs every variant on every seed. Text-model stages are shared between
/// the variants that need them within a seed. A failing variant is recorded
/// in `failures` without stopping the others.
pub fn run_ablation(variants: &[Variant], base: &RunConfig, seeds: &[u64]) -> Result<(EvalReport, Timings)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(LarrError::Empty("variants or seeds"));
    }
    let mut timings = Timings::new();
    let mut runs: BTreeMap<Variant, Vec<SeedResult>> = BTreeMap::new();
    let mut failures: BTreeMap<Variant, String> = BTreeMap::new();
    for &seed in seeds {
        let cfg = base.clone().seeded(seed);
        let ds = timed(&mut timings, format!("gen-data/{seed}"), || gen_data(&cfg.data))?;
        let mut art = SeedArtifacts {
            ds: &ds,
            cfg: &cfg,
            timings: &mut timings,
            cpt: None,
            generic: None,
            embedders: BTreeMap::new(),
            caches: BTreeMap::new(),
        };
        for &v in variants {
            if failures.contains_key(&v) {
                continue;
            }
            match run_variant(&mut art, &v.spec()) {
                Ok(r) => {
                    log::info!("stage=ablation variant={v} seed={seed} ctr_auc={:.4}", r.metrics.ctr_auc);
                    runs.entry(v).or_default().push(r);
                }
                Err(e) => {
                    log::warn!("stage=ablation variant={v} seed={seed} error={e}");
                    runs.remove(&v);
                    failures.insert(v, format!("seed {seed}: {e}"));
                }
            }
        }
    }
    let variants = runs
        .into_iter()
        .map(|(v, runs)| {
            let ms: Vec<Metrics> = runs.iter().map(|r| r.metrics).collect();
            let (mean, spread) = summarize(&ms);
            (v, VariantResult { runs, mean, spread })
        })
        .collect();
    let report = EvalReport {
        seeds: seeds.to_vec(),
        config_digest: base.digest(),
        variants,
        failures,
    };
    Ok((report, timings))
}
