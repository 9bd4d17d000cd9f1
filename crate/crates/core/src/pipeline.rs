//! Stage orchestration shared by the command line and the test suites.
//!
//! Every stage is a pure function of its inputs and the run configuration;
//! artifacts carry the digests of what produced them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::embed::{contrastive_finetune, ContrastiveConfig, Embedder, FinetuneReport};
use crate::error::{LarrError, Result};
use crate::evalbench::metrics::{auc, gauc};
use crate::fusion::{self, FusionConfig, FusionModel, IdSpace, SceneSource, TrainReport};
use crate::lm::{continual_pretrain, fit_example, GenericCorpus, LanguageModel, LmConfig, PretrainConfig, PretrainReport};
use crate::scenecache::{build_cache, feature_universe, model_digest, EmbeddingCache, Extractor, VectorSource};
use crate::synthworld::catalog::{CUISINES, REGIONS, TEMPERATURE_BINS, TIMESLOTS, WEATHERS};
use crate::synthworld::{
    entity_texts, gen_world, sample_interactions_with_truth, split_dataset, InteractionRecord, PoiTexts, SplitPolicy,
    TruthRow, UserTexts, World, WorldConfig,
};
use crate::textcodec::{build_pretrain_example, SpecialTokenRegistry, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub n_interactions: usize,
    pub test_fraction: f64,
    pub generic_lines: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_interactions: 50_000,
            test_fraction: 0.2,
            generic_lines: 1_800,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub context_len: usize,
    pub ff_mult: usize,
    pub mix_ratio: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        let c = LmConfig::for_vocab(1);
        Self {
            layers: c.layers,
            heads: c.heads,
            model_dim: c.model_dim,
            context_len: c.context_len,
            ff_mult: c.ff_mult,
            mix_ratio: c.mix_ratio,
        }
    }
}

impl LmSection {
    pub fn with_vocab(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            context_len: self.context_len,
            vocab_size,
            ff_mult: self.ff_mult,
            mix_ratio: self.mix_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheSection {
    pub source: VectorSource,
    pub batch: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            source: VectorSource::Hidden,
            batch: 32,
        }
    }
}

/// Embedding dimension of the text embedder.
pub const D_EMB: usize = 128;

/// Complete, resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub lm: LmSection,
    pub pretrain: PretrainConfig,
    pub finetune: ContrastiveConfig,
    pub cache: CacheSection,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults. The two language-model stages use higher
    /// learning rates (and fine-tuning more, smaller steps) than their own
    /// config defaults because the model is trained from scratch on a tiny
    /// corpus.
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            lm: LmSection::default(),
            pretrain: PretrainConfig {
                epochs: 1,
                lr: 1e-3,
                batch_size: 16,
                clip: Some(1.0),
                seed: 0,
            },
            finetune: ContrastiveConfig {
                tau: 0.1,
                lambda: [1.0, 1.0, 1.0],
                batch_size: 8,
                lr: 1e-3,
                steps: 400,
                clip: Some(1.0),
                seed: 0,
            },
            cache: CacheSection::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Propagates the run seed into every stage seed so that one number pins
    /// the whole run.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.world.seed = seed;
        self.pretrain.seed = seed.wrapping_add(1);
        self.finetune.seed = seed.wrapping_add(2);
        self.fusion.seed = seed.wrapping_add(3);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LarrError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

/// Everything derived from the world before any model is trained.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: World,
    pub records: Vec<InteractionRecord>,
    pub truth: Vec<TruthRow>,
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub users: Vec<UserTexts>,
    pub pois: Vec<PoiTexts>,
    pub generic: GenericCorpus,
    pub vocab: Vocab,
}

/// Fixed phrases that queries and scene texts may use beyond the world's own
/// descriptions.
fn auxiliary_texts() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    out.extend(CUISINES.iter().map(|c| c.tag.to_string()));
    out.extend(WEATHERS.iter().map(|w| format!("{} weather", w.name)));
    out.extend(TIMESLOTS.iter().map(|t| format!("{t} time")));
    out.extend(REGIONS.iter().map(|r| format!("vacation in {r}, hot weather; at home; away from home")));
    out.extend(TEMPERATURE_BINS.iter().map(|b| format!("{} temperature", b.1)));
    out.push("weekday weekend clicks orders 0123456789 ()|,;.".into());
    out
}

pub fn build_vocab(world: &World, users: &[UserTexts], pois: &[PoiTexts], generic: &GenericCorpus) -> Result<Vocab> {
    let mut texts: Vec<String> = generic.lines.clone();
    for p in pois {
        texts.extend(p.description.texts().into_iter().map(str::to_string));
    }
    for u in users {
        texts.extend(u.u.texts().into_iter().map(str::to_string));
    }
    texts.extend(feature_universe(world).into_iter().map(|(_, t)| t));
    texts.extend(auxiliary_texts());
    Vocab::build(texts.iter().map(|s| s.as_str()), None, SpecialTokenRegistry::standard())
}

pub fn gen_data(cfg: &DataConfig) -> Result<Dataset> {
    let world = gen_world(&cfg.world)?;
    let (records, truth) = sample_interactions_with_truth(&world, cfg.n_interactions, cfg.world.seed)?;
    Dataset::assemble(cfg, world, records, truth)
}

impl Dataset {
    /// Derives splits, entity texts, the generic corpus and the vocabulary
    /// from a world and its interaction log.
    pub fn assemble(cfg: &DataConfig, world: World, records: Vec<InteractionRecord>, truth: Vec<TruthRow>) -> Result<Self> {
        let (train, test) = split_dataset(
            &records,
            SplitPolicy {
                test_fraction: cfg.test_fraction,
            },
        )?;
        let (users, pois) = entity_texts(&world);
        let generic = GenericCorpus::synthesize(cfg.generic_lines, cfg.world.seed);
        let vocab = build_vocab(&world, &users, &pois, &generic)?;
        Ok(Dataset {
            world,
            records,
            truth,
            train,
            test,
            users,
            pois,
            generic,
            vocab,
        })
    }
}

/// POIs whose descriptions are held out of pretraining for perplexity
/// evaluation: every tenth POI.
pub fn is_heldout_poi(poi: usize) -> bool {
    poi % 10 == 9
}

pub type TokenExamples = Vec<(Vec<usize>, usize)>;

/// Encoded pretraining examples `(train, heldout)` from POI descriptions.
pub fn poi_corpus(ds: &Dataset, context_len: usize) -> Result<(TokenExamples, TokenExamples)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, p) in ds.pois.iter().enumerate() {
        let ex = fit_example(&build_pretrain_example(&p.description, &ds.vocab)?, context_len)?;
        if is_heldout_poi(i) {
            held.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, held))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PretrainCorpus {
    /// POI descriptions mixed with generic text.
    Mixed,
    /// Generic text only, with the same number of optimizer steps.
    GenericOnly,
}

pub fn pretrain_stage(ds: &Dataset, cfg: &RunConfig, corpus: PretrainCorpus) -> Result<(LanguageModel, PretrainReport)> {
    let lm_cfg = cfg.lm.with_vocab(ds.vocab.size());
    let mut lm = LanguageModel::new(lm_cfg.clone(), cfg.seed)?;
    let (poi_train, _) = poi_corpus(ds, lm_cfg.context_len)?;
    let generic = ds.generic.encode(&ds.vocab, lm_cfg.context_len);
    let report = match corpus {
        PretrainCorpus::Mixed => continual_pretrain(&mut lm, &poi_train, &generic, &cfg.pretrain)?,
        PretrainCorpus::GenericOnly => {
            // Same number of examples per epoch as the mixed corpus, all generic.
            let total = poi_train.len() + generic.len();
            let padded: TokenExamples = (0..total).map(|i| generic[i % generic.len()].clone()).collect();
            continual_pretrain(&mut lm, &[], &padded, &cfg.pretrain)?
        }
    };
    Ok((lm, report))
}

pub fn heldout_perplexity(lm: &LanguageModel, ds: &Dataset) -> Result<f64> {
    let (_, held) = poi_corpus(ds, lm.config().context_len)?;
    let items: Vec<(&[usize], usize)> = held.iter().map(|(s, st)| (s.as_slice(), *st)).collect();
    lm.perplexity(&items, 16)
}

pub fn finetune_stage(lm: LanguageModel, ds: &Dataset, cfg: &RunConfig) -> Result<(Embedder, FinetuneReport)> {
    let mut emb = Embedder::new(lm, D_EMB, cfg.finetune.seed)?;
    let report = contrastive_finetune(&mut emb, &ds.vocab, &ds.users, &ds.pois, &ds.train, &cfg.finetune)?;
    Ok((emb, report))
}

/// A frozen text model feeding the scene cache: a fine-tuned embedder or a
/// bare language model.
pub enum Frozen<'a> {
    Embedder(&'a Embedder),
    Lm(&'a LanguageModel),
}

impl Frozen<'_> {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        match self {
            Frozen::Embedder(e) => e.lm.encode_checkpoint(serde_json::json!({ "d_emb": e.d_emb() })),
            Frozen::Lm(l) => l.encode_checkpoint(serde_json::Value::Null),
        }
    }

    pub fn extractor<'b>(&'b self, vocab: &'b Vocab, source: VectorSource) -> Result<Extractor<'b>> {
        Ok(match (self, source) {
            (Frozen::Embedder(e), VectorSource::Projected) => Extractor::projected(e, vocab),
            (Frozen::Embedder(e), VectorSource::Hidden) => Extractor::hidden(&e.lm, vocab),
            (Frozen::Lm(l), VectorSource::Hidden) => Extractor::hidden(l, vocab),
            (Frozen::Lm(_), VectorSource::Projected) => {
                return Err(LarrError::InvalidConfig("projected vectors need a fine-tuned embedder".into()))
            }
        })
    }
}

pub fn cache_stage(model: &Frozen, ds: &Dataset, cfg: &RunConfig) -> Result<EmbeddingCache> {
    let digest = model_digest(&model.checkpoint_bytes());
    let ex = model.extractor(&ds.vocab, cfg.cache.source)?;
    build_cache(&feature_universe(&ds.world), &ex, digest, cfg.cache.batch)
}

pub fn fusion_stage(ds: &Dataset, cache: Option<&EmbeddingCache>, fcfg: &FusionConfig) -> Result<(FusionModel, TrainReport)> {
    let (d_scene, digest) = match cache {
        Some(c) => (c.d_emb, c.digest_hex()),
        None => (0, String::new()),
    };
    let mut cfg = fcfg.clone();
    if cache.is_none() {
        cfg.semantic = false;
    }
    let n_valid = (ds.train.len() as f64 * cfg.validation_fraction).round() as usize;
    let mut model = FusionModel::new(cfg, IdSpace::of(&ds.world), d_scene.max(1), digest)?;
    if let Some(c) = cache {
        model.fit_scene_normalizer(c)?;
    }
    let (fit, valid) = ds.train.split_at(ds.train.len() - n_valid);
    let fit = fusion::prepare(&ds.world, cache, fit)?;
    let valid = fusion::prepare(&ds.world, cache, valid)?;
    let report = fusion::train(&mut model, &fit, Some(&valid), cache)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ctr_auc: f64,
    pub ctcvr_auc: f64,
    pub ctr_gauc: f64,
    pub ctcvr_gauc: f64,
}

pub fn metrics_of(scores: &[(f64, f64)], records: &[InteractionRecord]) -> Result<Metrics> {
    let ctr: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let ctcvr: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let clicks: Vec<u8> = records.iter().map(|r| r.click).collect();
    let orders: Vec<u8> = records.iter().map(|r| r.order).collect();
    let groups: Vec<u64> = records.iter().map(|r| r.user_id.0 as u64).collect();
    Ok(Metrics {
        ctr_auc: auc(&ctr, &clicks)?,
        ctcvr_auc: auc(&ctcvr, &orders)?,
        ctr_gauc: gauc(&ctr, &clicks, &groups)?,
        ctcvr_gauc: gauc(&ctcvr, &orders, &groups)?,
    })
}

pub fn evaluate(model: &FusionModel, ds: &Dataset, cache: Option<&EmbeddingCache>) -> Result<Metrics> {
    if let Some(c) = cache {
        model.check_cache(c)?;
    }
    let test = fusion::prepare(&ds.world, cache, &ds.test)?;
    let source = match cache {
        Some(c) => SceneSource::Cache(c),
        None => SceneSource::Direct(&[]),
    };
    let scores = model.predict_all(&test, &source, 512)?;
    metrics_of(&scores, &ds.test)
}

/// Metrics of the generator's own click probabilities on the test split.
pub fn oracle_metrics(ds: &Dataset) -> Result<Metrics> {
    let offset = ds.records.len() - ds.test.len();
    let mut by_time: BTreeMap<u64, &TruthRow> = BTreeMap::new();
    for (r, t) in ds.records.iter().zip(&ds.truth) {
        by_time.insert(r.time, t);
    }
    let scores: Vec<(f64, f64)> = ds
        .test
        .iter()
        .map(|r| {
            let t = by_time[&r.time];
            (t.p_click, t.p_order)
        })
        .collect();
    debug_assert!(offset <= ds.records.len());
    metrics_of(&scores, &ds.test)
}
