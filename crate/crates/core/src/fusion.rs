//! Online CTR/CTCVR model fusing cached scene vectors with a collaborative
//! tower.
//!
//! The scene path prepends a trainable aggregation vector to the `R` cached
//! scene vectors, runs a bidirectional transformer encoder over the sequence,
//! pools, and projects to `e_s`. The collaborative tower embeds user and POI
//! ids (their concatenation is `e_t`) plus context ids. Both feed a shared
//! bottom with CTR and CTCVR heads; an InfoNCE term aligns `e_s` with `e_t`.

use std::path::Path;

use larr_nn::layers::{Builder, Init, Linear, TransformerBlock};
use larr_nn::{checkpoint, AdamConfig, AttentionSpec, Graph, MaskMode, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::symmetric_info_nce_with_negatives;
use crate::error::{invalid, LarrError, Result};
use crate::evalbench::metrics::auc;
use crate::scenecache::{scene_keys, EmbeddingCache, R};
use crate::synthworld::{InteractionRecord, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over all encoder outputs including the aggregation position.
    #[default]
    Mean,
    /// The aggregation position's output only.
    Agg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Whether the scene path exists (false reproduces the collaborative-only
    /// model).
    pub semantic: bool,
    pub d_align: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff_mult: usize,
    pub projection_hidden: usize,
    pub pooling: Pooling,
    pub user_dim: usize,
    pub poi_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub tau: f64,
    /// `[beta_1, beta_2]`: weights of the CTR/CTCVR loss and the alignment
    /// loss.
    pub beta: [f64; 2],
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound on passes over the training examples.
    pub epochs: usize,
    /// Epochs without validation improvement before training stops; only
    /// used when a validation set is supplied. The default equals `epochs`:
    /// validation AUC often plateaus or dips for several epochs before
    /// rising, so the whole budget runs and the best epoch is restored.
    pub patience: usize,
    /// Trailing fraction (by time) of the training records held out for
    /// model selection; 0 trains on everything for exactly `epochs` passes.
    pub validation_fraction: f64,
    /// Per-slot probability of replacing a scene vector with the slot's
    /// learned default during training.
    pub feature_dropout: f64,
    /// L2 penalty on the batch's gathered user and POI embeddings (mean
    /// squared norm of `e_t` rows).
    pub embedding_l2: f64,
    /// Extra uniformly sampled alignment negatives, as a multiple of the
    /// batch size.
    pub negative_ratio: f64,
    /// Serve misses from the learned per-slot defaults instead of failing.
    pub fallback: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            semantic: true,
            d_align: 32,
            encoder_layers: 1,
            encoder_heads: 4,
            encoder_ff_mult: 2,
            projection_hidden: 64,
            pooling: Pooling::Mean,
            user_dim: 16,
            poi_dim: 16,
            context_dim: 8,
            hidden: 64,
            tau: 0.1,
            beta: [1.0, 0.05],
            lr: 3e-3,
            batch_size: 64,
            epochs: 12,
            patience: 12,
            validation_fraction: 0.1,
            feature_dropout: 0.02,
            embedding_l2: 0.1,
            negative_ratio: 0.0,
            fallback: true,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LarrError::InvalidConfig(m.into()));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if self.beta.iter().any(|&b| !(b >= 0.0)) || self.beta[0] + self.beta[1] <= 0.0 {
            return bad("beta weights must be >= 0 with a positive sum");
        }
        if self.user_dim + self.poi_dim != self.d_align {
            return bad("user_dim + poi_dim must equal d_align");
        }
        if self.batch_size < 2 || self.lr <= 0.0 {
            return bad("batch_size must be >= 2 and lr > 0");
        }
        if self.epochs == 0 || self.patience == 0 || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("epochs and patience must be >= 1 and validation_fraction lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.feature_dropout) || !(self.negative_ratio >= 0.0) || !(self.embedding_l2 >= 0.0) {
            return bad("feature_dropout must lie in [0, 1) and negative_ratio be >= 0");
        }
        Ok(())
    }
}

/// Cardinalities of the id features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSpace {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_weather: usize,
    pub n_timeslots: usize,
    pub n_cells: usize,
}

impl IdSpace {
    pub fn of(world: &World) -> Self {
        Self {
            n_users: world.users.len(),
            n_pois: world.pois.len(),
            n_weather: world.config.n_weather,
            n_timeslots: world.config.n_timeslots,
            n_cells: world.config.grid_size * world.config.grid_size,
        }
    }
}

/// One request with its ids resolved and its scene slots mapped to cache
/// rows (`None` = miss).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub poi: usize,
    pub weather: usize,
    pub timeslot: usize,
    pub cell: usize,
    pub weekend: bool,
    pub scene: [Option<usize>; R],
    pub click: f64,
    pub order: f64,
}

pub fn to_example(world: &World, cache: Option<&EmbeddingCache>, r: &InteractionRecord) -> Example {
    let scene = match cache {
        Some(c) => {
            let keys = scene_keys(world, r);
            std::array::from_fn(|i| c.position(&keys[i]))
        }
        None => [None; R],
    };
    Example {
        user: r.user_id.0 as usize,
        poi: r.poi_id.0 as usize,
        weather: r.context.weather,
        timeslot: r.context.timeslot,
        cell: r.context.cell.y as usize * world.config.grid_size + r.context.cell.x as usize,
        weekend: r.context.weekend,
        scene,
        click: r.click as f64,
        order: r.order as f64,
    }
}

/// Converts records, requiring every scene slot to resolve when a cache is
/// given.
pub fn prepare(world: &World, cache: Option<&EmbeddingCache>, records: &[InteractionRecord]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let ex = to_example(world, cache, r);
            if cache.is_some() {
                if let Some(i) = ex.scene.iter().position(|s| s.is_none()) {
                    let keys = scene_keys(world, r);
                    return Err(LarrError::CacheMiss {
                        index: i,
                        text: keys[i].text.clone(),
                    });
                }
            }
            Ok(ex)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct SceneLayout {
    /// Fixed per-slot standardization of incoming scene vectors, fitted on
    /// the cache and never trained.
    norm_mean: ParamId,
    norm_scale: ParamId,
    agg: ParamId,
    defaults: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    proj1: Linear,
    proj2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    scene: Option<SceneLayout>,
    user: ParamId,
    poi: ParamId,
    weather: ParamId,
    timeslot: ParamId,
    cell: ParamId,
    day: ParamId,
    bottom1: Linear,
    bottom2: Linear,
    ctr: Linear,
    ctcvr: Linear,
}

impl Layout {
    fn build(b: &mut Builder, c: &FusionConfig, ids: &IdSpace, d_scene: usize) -> Result<Self> {
        let scene = if c.semantic {
            if d_scene % c.encoder_heads != 0 {
                return Err(LarrError::InvalidConfig("scene dim must be divisible by encoder heads".into()));
            }
            Some(SceneLayout {
                norm_mean: b.tensor("scene.norm_mean", &[R, d_scene], Init::Zeros)?,
                norm_scale: b.tensor("scene.norm_scale", &[R, d_scene], Init::Ones)?,
                agg: b.tensor("scene.agg", &[1, d_scene], Init::FanIn(d_scene))?,
                defaults: b.tensor("scene.defaults", &[R, d_scene], Init::FanIn(d_scene))?,
                pos: b.tensor("scene.pos", &[R + 1, d_scene], Init::Uniform(1.0))?,
                blocks: (0..c.encoder_layers)
                    .map(|i| TransformerBlock::new(b, &format!("scene.block{i}"), d_scene, c.encoder_ff_mult))
                    .collect::<std::result::Result<_, _>>()?,
                proj1: Linear::new(b, "scene.proj1", d_scene, c.projection_hidden, true)?,
                proj2: Linear::new(b, "scene.proj2", c.projection_hidden, c.d_align, true)?,
            })
        } else {
            None
        };
        let table = |b: &mut Builder, name: &str, n: usize, d: usize| b.tensor(name, &[n + 1, d], Init::Uniform(0.05));
        let user = table(b, "collab.user", ids.n_users, c.user_dim)?;
        let poi = table(b, "collab.poi", ids.n_pois, c.poi_dim)?;
        let weather = table(b, "collab.weather", ids.n_weather, c.context_dim)?;
        let timeslot = table(b, "collab.timeslot", ids.n_timeslots, c.context_dim)?;
        let cell = table(b, "collab.cell", ids.n_cells, c.context_dim)?;
        let day = table(b, "collab.day", 1, c.context_dim)?;
        let in_dim = c.d_align + 4 * c.context_dim + if c.semantic { c.d_align } else { 0 };
        Ok(Self {
            scene,
            user,
            poi,
            weather,
            timeslot,
            cell,
            day,
            bottom1: Linear::new(b, "collab.bottom1", in_dim, c.hidden, true)?,
            bottom2: Linear::new(b, "collab.bottom2", c.hidden, c.hidden, true)?,
            ctr: Linear::with_init(b, "head.ctr", c.hidden, 1, true, Init::Zeros)?,
            ctcvr: Linear::with_init(b, "head.ctcvr", c.hidden, 1, true, Init::Zeros)?,
        })
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub e_s: Option<Var>,
    pub e_t: Var,
    pub ctr: Var,
    pub ctcvr: Var,
}

/// Where scene vectors come from for a batch: rows of a cache, or vectors
/// supplied directly (the cache-bypass path).
pub enum SceneSource<'a> {
    Cache(&'a EmbeddingCache),
    Direct(&'a [[Option<Vec<f64>>; R]]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FusionMeta {
    kind: String,
    config: FusionConfig,
    ids: IdSpace,
    d_scene: usize,
    /// Digest of the model the scene cache was extracted from; empty for the
    /// collaborative-only model.
    scene_model_digest: String,
}

pub const CHECKPOINT_KIND: &str = "fusion";

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub ids: IdSpace,
    pub d_scene: usize,
    pub scene_model_digest: String,
    pub store: ParamStore,
    layout: Layout,
}

fn clamp_id(id: usize, n: usize) -> usize {
    if id < n {
        id
    } else {
        n
    }
}

impl FusionModel {
    pub fn new(config: FusionConfig, ids: IdSpace, d_scene: usize, scene_model_digest: String) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout::build(&mut Builder::fresh(&mut store, &mut rng), &config, &ids, d_scene)?;
        Ok(Self {
            config,
            ids,
            d_scene,
            scene_model_digest,
            store,
            layout,
        })
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let meta = FusionMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            ids: self.ids,
            d_scene: self.d_scene,
            scene_model_digest: self.scene_model_digest.clone(),
        };
        checkpoint::encode(&self.store, &serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (mut store, meta) = checkpoint::decode(bytes)?;
        let meta: FusionMeta = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(LarrError::Corrupt(format!("checkpoint kind `{}` is not a fusion model", meta.kind)));
        }
        let layout = Layout::build(&mut Builder::bind(&mut store), &meta.config, &meta.ids, meta.d_scene)?;
        Ok(Self {
            config: meta.config,
            ids: meta.ids,
            d_scene: meta.d_scene,
            scene_model_digest: meta.scene_model_digest,
            store,
            layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::write_atomic(path, &self.encode_checkpoint())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LarrError::MissingArtifact {
                path: path.display().to_string(),
                producer: "train",
            });
        }
        Self::decode_checkpoint(&std::fs::read(path)?)
    }

    /// Fails unless `cache` was extracted from the model this one was
    /// trained against.
    pub fn check_cache(&self, cache: &EmbeddingCache) -> Result<()> {
        if self.layout.scene.is_none() {
            return Ok(());
        }
        if cache.d_emb != self.d_scene {
            return invalid("fusion", format!("cache dim {} but model expects {}", cache.d_emb, self.d_scene));
        }
        cache.verify(&self.scene_model_digest)
    }

    /// Sets the per-slot standardization to the mean and inverse standard
    /// deviation of each slot's vectors in `cache`.
    pub fn fit_scene_normalizer(&mut self, cache: &EmbeddingCache) -> Result<()> {
        let Some(s) = self.layout.scene.as_ref() else {
            return Ok(());
        };
        let (mean_id, scale_id) = (s.norm_mean, s.norm_scale);
        let d = self.d_scene;
        if cache.d_emb != d {
            return invalid("fit_scene_normalizer", format!("cache dim {} for a {d}-dim encoder", cache.d_emb));
        }
        let mut sum = vec![0.0; R * d];
        let mut sq = vec![0.0; R * d];
        let mut count = [0usize; R];
        for (i, key) in cache.keys().iter().enumerate() {
            let j = key.index;
            count[j] += 1;
            for (k, &x) in cache.vector(i).iter().enumerate() {
                sum[j * d + k] += x;
                sq[j * d + k] += x * x;
            }
        }
        let mut mean = vec![0.0; R * d];
        let mut scale = vec![1.0; R * d];
        for j in 0..R {
            if count[j] == 0 {
                continue;
            }
            let n = count[j] as f64;
            for k in 0..d {
                let m = sum[j * d + k] / n;
                let var = (sq[j * d + k] / n - m * m).max(0.0);
                mean[j * d + k] = m;
                scale[j * d + k] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            }
        }
        *self.store.value_mut(mean_id) = Tensor::new(vec![R, d], mean)?;
        *self.store.value_mut(scale_id) = Tensor::new(vec![R, d], scale)?;
        Ok(())
    }

    pub fn is_semantic(&self) -> bool {
        self.layout.scene.is_some()
    }

    /// Scene path: `[agg, h_0 .. h_{R-1}]` -> encoder -> pool -> projection.
    /// `scene` holds per-example, per-slot rows of `vectors` (`None` selects
    /// the slot default).
    pub fn scene_encode(&self, g: &mut Graph, vectors: Tensor, scene: &[[Option<usize>; R]]) -> Result<Var> {
        let s = self
            .layout
            .scene
            .as_ref()
            .ok_or(LarrError::InvalidConfig("model has no scene path".into()))?;
        let b = scene.len();
        let d = self.d_scene;
        if vectors.cols() != d {
            return invalid("scene_encode", format!("scene vectors of dim {} for a {d}-dim encoder", vectors.cols()));
        }
        let n_vec = vectors.rows();
        let agg = g.param(&self.store, s.agg)?;
        let defaults = g.param(&self.store, s.defaults)?;
        let h = g.constant(vectors)?;
        let table = g.concat_rows(&[agg, defaults, h])?;
        let mut idx = Vec::with_capacity(b * (R + 1));
        for slots in scene {
            idx.push(0);
            for (j, slot) in slots.iter().enumerate() {
                idx.push(match slot {
                    Some(i) if *i < n_vec => 1 + R + i,
                    Some(_) => return invalid("scene_encode", "scene row out of range"),
                    None => 1 + j,
                });
            }
        }
        let x = g.gather_rows(table, &idx)?;
        let pos = g.param(&self.store, s.pos)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..=R).collect();
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, p)?;
        let spec = AttentionSpec::new(b, R + 1, self.config.encoder_heads, MaskMode::Bidirectional);
        for block in &s.blocks {
            x = block.forward(g, &self.store, x, &spec)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => g.group_mean_rows(x, R + 1)?,
            Pooling::Agg => {
                let rows: Vec<usize> = (0..b).map(|i| i * (R + 1)).collect();
                g.gather_rows(x, &rows)?
            }
        };
        let z = s.proj1.forward(g, &self.store, pooled)?;
        let z = g.gelu(z)?;
        Ok(s.proj2.forward(g, &self.store, z)?)
    }

    /// `e_t` rows for `(user, poi)` id pairs.
    pub fn target_embedding(&self, g: &mut Graph, users: &[usize], pois: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let ut = g.param(&self.store, l.user)?;
        let u: Vec<usize> = users.iter().map(|&i| clamp_id(i, self.ids.n_users)).collect();
        let ue = g.gather_rows(ut, &u)?;
        let pt = g.param(&self.store, l.poi)?;
        let p: Vec<usize> = pois.iter().map(|&i| clamp_id(i, self.ids.n_pois)).collect();
        let pe = g.gather_rows(pt, &p)?;
        Ok(g.concat_cols(&[ue, pe])?)
    }

    /// Full forward. `scene` may be `None` only for the collaborative-only
    /// model.
    pub fn forward(&self, g: &mut Graph, batch: &[Example], scene: Option<(Tensor, Vec<[Option<usize>; R]>)>) -> Result<FusionOutput> {
        if batch.is_empty() {
            return Err(LarrError::Empty("batch"));
        }
        let l = &self.layout;
        let e_s = match (&l.scene, scene) {
            (Some(_), Some((vectors, slots))) => Some(self.scene_encode(g, vectors, &slots)?),
            (Some(_), None) => return invalid("fusion.forward", "scene vectors required"),
            (None, _) => None,
        };
        let users: Vec<usize> = batch.iter().map(|e| e.user).collect();
        let pois: Vec<usize> = batch.iter().map(|e| e.poi).collect();
        let e_t = self.target_embedding(g, &users, &pois)?;
        let mut ctx = Vec::new();
        for (table, n, get) in [
            (l.weather, self.ids.n_weather, Box::new(|e: &Example| e.weather) as Box<dyn Fn(&Example) -> usize>),
            (l.timeslot, self.ids.n_timeslots, Box::new(|e: &Example| e.timeslot)),
            (l.cell, self.ids.n_cells, Box::new(|e: &Example| e.cell)),
            (l.day, 1, Box::new(|e: &Example| e.weekend as usize)),
        ] {
            let t = g.param(&self.store, table)?;
            let idx: Vec<usize> = batch.iter().map(|e| clamp_id(get(e), n)).collect();
            ctx.push(g.gather_rows(t, &idx)?);
        }
        let mut parts = vec![e_t];
        parts.extend(ctx);
        if let Some(es) = e_s {
            parts.push(es);
        }
        let x = g.concat_cols(&parts)?;
        let h = l.bottom1.forward(g, &self.store, x)?;
        let h = g.relu(h)?;
        let h = l.bottom2.forward(g, &self.store, h)?;
        let h = g.relu(h)?;
        let ctr = l.ctr.forward(g, &self.store, h)?;
        let ctcvr = l.ctcvr.forward(g, &self.store, h)?;
        Ok(FusionOutput { e_s, e_t, ctr, ctcvr })
    }

    /// Gathers the batch's scene vectors into a dense tensor and remaps slot
    /// indices to its rows. Slots dropped by `drop` use the slot default.
    pub fn gather_scene(
        &self,
        batch: &[Example],
        source: &SceneSource,
        mut drop: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Option<(Tensor, Vec<[Option<usize>; R]>)>> {
        if !self.is_semantic() {
            return Ok(None);
        }
        let d = self.d_scene;
        let norm = self.layout.scene.as_ref().expect("semantic model has a scene layout");
        let mean = self.store.value(norm.norm_mean).data();
        let scale = self.store.value(norm.norm_scale).data();
        let mut data = Vec::new();
        let mut slots = Vec::with_capacity(batch.len());
        for (bi, e) in batch.iter().enumerate() {
            let mut s = [None; R];
            for j in 0..R {
                if let Some((rng, p)) = drop.as_mut() {
                    if *p > 0.0 && rng.random_bool(*p) {
                        continue;
                    }
                }
                let v: Option<&[f64]> = match source {
                    SceneSource::Cache(c) => e.scene[j].map(|i| c.vector(i)),
                    SceneSource::Direct(rows) => rows[bi][j].as_deref(),
                };
                match v {
                    Some(v) if v.len() == d => {
                        s[j] = Some(data.len() / d);
                        let (m, c) = (&mean[j * d..(j + 1) * d], &scale[j * d..(j + 1) * d]);
                        data.extend(v.iter().zip(m).zip(c).map(|((x, m), c)| (x - m) * c));
                    }
                    Some(v) => return invalid("fusion", format!("scene vector of dim {} for {d}", v.len())),
                    None if self.config.fallback => {
                        log::debug!("scene slot {j} unresolved; using learned default");
                    }
                    None => {
                        return Err(LarrError::CacheMiss {
                            index: j,
                            text: String::from("<unresolved>"),
                        })
                    }
                }
            }
            slots.push(s);
        }
        let rows = data.len() / d;
        let t = if rows == 0 {
            Tensor::zeros(&[1, d])
        } else {
            Tensor::new(vec![rows, d], data)?
        };
        Ok(Some((t, slots)))
    }

    /// Builds `L_3 = beta_1 * L_ctr + beta_2 * L_cl` where `L_ctr` sums the
    /// CTR and CTCVR binary cross-entropies.
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &[Example],
        source: &SceneSource,
        rng: Option<&mut ChaCha8Rng>,
        negatives: &[(usize, usize)],
    ) -> Result<(Var, LossParts)> {
        let mut rng = rng;
        let drop = rng.as_deref_mut().map(|r| (r, self.config.feature_dropout));
        let scene = self.gather_scene(batch, source, drop)?;
        let out = self.forward(g, batch, scene)?;
        let clicks: Vec<f64> = batch.iter().map(|e| e.click).collect();
        let orders: Vec<f64> = batch.iter().map(|e| e.order).collect();
        let l_ctr = g.bce_with_logits(out.ctr, &clicks)?;
        let l_ctcvr = g.bce_with_logits(out.ctcvr, &orders)?;
        let l_rec = g.add(l_ctr, l_ctcvr)?;
        let [b1, b2] = self.config.beta;
        let mut parts = LossParts {
            ctr: g.value(l_ctr).item(),
            ctcvr: g.value(l_ctcvr).item(),
            align: 0.0,
        };
        let mut total = g.scale(l_rec, b1)?;
        if self.config.embedding_l2 > 0.0 {
            let sq = g.mul(out.e_t, out.e_t)?;
            let sq = g.sum(sq)?;
            let reg = g.scale(sq, self.config.embedding_l2 / batch.len() as f64)?;
            total = g.add(total, reg)?;
        }
        if let (Some(e_s), true) = (out.e_s, b2 > 0.0 && batch.len() >= 2) {
            let extra = if negatives.is_empty() {
                None
            } else {
                let (u, p): (Vec<usize>, Vec<usize>) = negatives.iter().copied().unzip();
                Some(self.target_embedding(g, &u, &p)?)
            };
            let l_cl = symmetric_info_nce_with_negatives(g, e_s, out.e_t, None, extra, self.config.tau)?;
            parts.align = g.value(l_cl).item();
            let l_cl = g.scale(l_cl, b2)?;
            total = g.add(total, l_cl)?;
        }
        Ok((total, parts))
    }

    /// Sigmoid probabilities `(p_ctr, p_ctcvr)` for a batch.
    pub fn predict_batch(&self, batch: &[Example], source: &SceneSource) -> Result<Vec<(f64, f64)>> {
        let scene = self.gather_scene(batch, source, None)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, scene)?;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let ctr = g.value(out.ctr).data();
        let ctcvr = g.value(out.ctcvr).data();
        Ok(ctr.iter().zip(ctcvr).map(|(&a, &b)| (sig(a), sig(b))).collect())
    }

    pub fn predict_all(&self, examples: &[Example], source: &SceneSource, chunk: usize) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(examples.len());
        for c in examples.chunks(chunk.max(1)) {
            out.extend(self.predict_batch(c, source)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ctr: f64,
    pub ctcvr: f64,
    pub align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub last_parts: LossParts,
    /// Epoch (1-based) whose parameters were kept; the last epoch when no
    /// validation set was given.
    pub best_epoch: usize,
    /// Validation CTR AUC per epoch.
    pub valid_auc: Vec<f64>,
}

/// One optimizer step.
pub fn train_step(
    model: &mut FusionModel,
    batch: &[Example],
    source: &SceneSource,
    rng: &mut ChaCha8Rng,
    negatives: &[(usize, usize)],
) -> Result<(f64, LossParts)> {
    let mut g = Graph::new();
    let (loss, parts) = model.loss(&mut g, batch, source, Some(rng), negatives)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(larr_nn::NnError::NonFinite("fusion loss").into());
    }
    g.backward_into(loss, &mut model.store)?;
    model.store.adam_step(&AdamConfig::with_lr(model.config.lr))?;
    Ok((value, parts))
}

/// CTR AUC of `model` on `examples`.
pub fn ctr_auc(model: &FusionModel, examples: &[Example], source: &SceneSource) -> Result<f64> {
    let scores: Vec<f64> = model.predict_all(examples, source, 512)?.into_iter().map(|p| p.0).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.click as u8).collect();
    auc(&scores, &labels)
}

/// Trains for up to `config.epochs` passes over shuffled examples. With a
/// validation set, stops after `config.patience` epochs without a CTR AUC
/// improvement and keeps the best epoch's parameters.
pub fn train(
    model: &mut FusionModel,
    examples: &[Example],
    valid: Option<&[Example]>,
    cache: Option<&EmbeddingCache>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(LarrError::Empty("training examples"));
    }
    let source = match cache {
        Some(c) => {
            model.check_cache(c)?;
            SceneSource::Cache(c)
        }
        None if model.is_semantic() => return invalid("fusion.train", "semantic model needs a scene cache"),
        None => SceneSource::Direct(&[]),
    };
    let valid = valid.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0xf05e);
    let bs = model.config.batch_size;
    let n_neg = (model.config.negative_ratio * bs as f64).round() as usize;
    let mut report = TrainReport {
        steps: 0,
        epochs_run: 0,
        final_loss: f64::NAN,
        last_parts: LossParts::default(),
        best_epoch: 0,
        valid_auc: Vec::new(),
    };
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..model.config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_parts = LossParts::default();
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let negatives: Vec<(usize, usize)> = (0..n_neg)
                .map(|_| {
                    let e = &examples[rng.random_range(0..examples.len())];
                    let f = &examples[rng.random_range(0..examples.len())];
                    (e.user, f.poi)
                })
                .collect();
            let (loss, parts) = train_step(model, &batch, &source, &mut rng, &negatives)?;
            report.steps += 1;
            report.final_loss = loss;
            report.last_parts = parts;
            epoch_parts.ctr += parts.ctr;
            epoch_parts.ctcvr += parts.ctcvr;
            epoch_parts.align += parts.align;
            epoch_steps += 1;
            if report.steps % 200 == 0 {
                log::info!(
                    "stage=train epoch={epoch} step={} loss={loss:.4} ctr={:.4} ctcvr={:.4} align={:.4}",
                    report.steps,
                    parts.ctr,
                    parts.ctcvr,
                    parts.align
                );
            }
        }
        report.epochs_run = epoch + 1;
        let n = epoch_steps.max(1) as f64;
        log::info!(
            "stage=train epoch={epoch} mean_ctr={:.4} mean_ctcvr={:.4} mean_align={:.4}",
            epoch_parts.ctr / n,
            epoch_parts.ctcvr / n,
            epoch_parts.align / n
        );
        let Some(v) = valid else {
            report.best_epoch = epoch + 1;
            continue;
        };
        let a = ctr_auc(model, v, &source)?;
        report.valid_auc.push(a);
        log::info!("stage=train epoch={epoch} valid_ctr_auc={a:.4}");
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, model.store.clone()));
            report.best_epoch = epoch + 1;
        } else if epoch + 1 - report.best_epoch >= model.config.patience {
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids() -> IdSpace {
        IdSpace {
            n_users: 3,
            n_pois: 4,
            n_weather: 2,
            n_timeslots: 2,
            n_cells: 4,
        }
    }

    fn example(user: usize, poi: usize) -> Example {
        Example {
            user,
            poi,
            weather: 1,
            timeslot: 0,
            cell: 2,
            weekend: false,
            scene: [None; R],
            click: 1.0,
            order: 0.0,
        }
    }

    #[test]
    fn zero_heads_predict_half() {
        let m = FusionModel::new(FusionConfig { semantic: false, ..FusionConfig::default() }, ids(), 8, String::new()).unwrap();
        let p = m.predict_batch(&[example(0, 1), example(5, 9)], &SceneSource::Direct(&[])).unwrap();
        for (a, b) in p {
            assert_eq!((a, b), (0.5, 0.5));
        }
    }

    #[test]
    fn shapes() {
        let m = FusionModel::new(FusionConfig::default(), ids(), 8, String::new()).unwrap();
        let rows: Vec<[Option<Vec<f64>>; R]> = (0..2).map(|_| std::array::from_fn(|j| Some(vec![j as f64 * 0.1; 8]))).collect();
        let batch = [example(0, 1), example(1, 2)];
        let scene = m.gather_scene(&batch, &SceneSource::Direct(&rows), None).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch, scene).unwrap();
        assert_eq!(g.shape(out.e_s.unwrap()), &[2, 32]);
        assert_eq!(g.shape(out.e_t), &[2, 32]);
        assert_eq!(g.shape(out.ctr), &[2, 1]);
    }

    #[test]
    fn config_validation() {
        let mut c = FusionConfig::default();
        c.user_dim = 8;
        assert!(c.validate().is_err());
        let mut c = FusionConfig::default();
        c.beta = [0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = FusionConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = FusionModel::new(FusionConfig::default(), ids(), 8, "abc".into()).unwrap();
        let bytes = m.encode_checkpoint();
        let back = FusionModel::decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.encode_checkpoint(), bytes);
    }
}
