//! Contrastive fine-tuning of the language model into a text embedder.
//!
//! A text is embedded by projecting the final hidden state of its last token
//! (always a keyword end marker). Three pair strategies feed the loss:
//! profile vs. actions of the same user, identity vs. semantic fields of the
//! same POI, and a user with a POI they ordered from.

use std::collections::BTreeSet;

use larr_nn::layers::{Builder, Init, Linear};
use larr_nn::{AdamConfig, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::symmetric_info_nce;
use crate::error::{invalid, LarrError, Result};
use crate::lm::LanguageModel;
use crate::synthworld::{InteractionRecord, PoiTexts, UserTexts};
use crate::textcodec::{wrap_slices, KeywordedText, Vocab};

pub const PROJECTION: &str = "embed.proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda: [f64; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: [1.0, 1.0, 1.0],
            batch_size: 64,
            lr: 1e-4,
            steps: 100,
            clip: Some(1.0),
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LarrError::InvalidConfig("tau must be > 0".into()));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) || self.lambda.iter().all(|&l| l == 0.0) {
            return Err(LarrError::InvalidConfig("lambda weights must be >= 0 with one > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(LarrError::InvalidConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// The language model plus a linear projection to `d_emb`.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub lm: LanguageModel,
    proj: Linear,
    d_emb: usize,
}

impl Embedder {
    /// Adds a freshly initialized projection to `lm`.
    pub fn new(mut lm: LanguageModel, d_emb: usize, seed: u64) -> Result<Self> {
        let d = lm.config().model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Linear::with_init(&mut Builder::fresh(&mut lm.store, &mut rng), PROJECTION, d, d_emb, false, Init::FanIn(d))?;
        Ok(Self { lm, proj, d_emb })
    }

    /// Binds to a projection already stored alongside the LM parameters.
    pub fn bind(mut lm: LanguageModel, d_emb: usize) -> Result<Self> {
        let d = lm.config().model_dim;
        let proj = Linear::with_init(&mut Builder::bind(&mut lm.store), PROJECTION, d, d_emb, false, Init::Zeros)?;
        Ok(Self { lm, proj, d_emb })
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    /// Hidden states at each sequence's last token, `[n, model_dim]`.
    pub fn last_hidden(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let fwd = self.lm.forward(g, seqs)?;
        let rows: Vec<usize> = fwd.lens.iter().enumerate().map(|(i, &l)| fwd.row(i, l - 1)).collect();
        Ok(g.gather_rows(fwd.hidden, &rows)?)
    }

    /// Projected embeddings `[n, d_emb]`.
    pub fn embed_graph(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let h = self.last_hidden(g, seqs)?;
        Ok(self.proj.forward(g, &self.lm.store, h)?)
    }

    pub fn project(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        Ok(self.proj.forward(g, &self.lm.store, hidden)?)
    }

    /// Embeds each sequence; batches are evaluated in chunks of `chunk`.
    pub fn embed_seqs(&self, seqs: &[Vec<usize>], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for c in seqs.chunks(chunk.max(1)) {
            let refs: Vec<&[usize]> = c.iter().map(|s| s.as_slice()).collect();
            let mut g = Graph::new();
            let e = self.embed_graph(&mut g, &refs)?;
            let t = g.value(e);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn embed_text(&self, vocab: &Vocab, text: &KeywordedText) -> Result<Vec<f64>> {
        let seq = encode_text(vocab, text, self.lm.config().context_len)?;
        Ok(self.embed_seqs(&[seq], 1)?.remove(0))
    }

    /// Cosine similarity of two embedded texts.
    pub fn score(&self, vocab: &Vocab, a: &KeywordedText, b: &KeywordedText) -> Result<f64> {
        let va = self.embed_text(vocab, a)?;
        let vb = self.embed_text(vocab, b)?;
        cosine(&va, &vb)
    }
}

/// Cosine similarity; zero-norm inputs are an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid("cosine", "dimension mismatch");
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine", "zero-norm embedding");
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Wraps a text and fits it to the context. Over-long texts lose characters
/// from the end of their longest slice so that the closing marker survives.
pub fn encode_text(vocab: &Vocab, text: &KeywordedText, context_len: usize) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(LarrError::Empty("text"));
    }
    let seq = wrap_slices(text, vocab)?;
    if seq.len() <= context_len {
        return Ok(seq);
    }
    let mut t = text.clone();
    let mut excess = seq.len() - context_len;
    while excess > 0 {
        let longest = (0..t.len()).max_by_key(|&i| t.slices[i].text.chars().count()).expect("non-empty");
        let n = t.slices[longest].text.chars().count();
        if n == 0 {
            return invalid("encode_text", "markers alone exceed the context");
        }
        let cut = excess.min(n);
        t.slices[longest].text = t.slices[longest].text.chars().take(n - cut).collect();
        excess -= cut;
    }
    wrap_slices(&t, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    UserUser,
    PoiPoi,
    UserPoi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub kind: PairKind,
    pub lhs: Vec<KeywordedText>,
    pub rhs: Vec<KeywordedText>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.lhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lhs.is_empty()
    }
}

fn reject_duplicates(what: &'static str, ids: impl IntoIterator<Item = u32>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return invalid("build_pairs", format!("duplicate {what} {id} in batch"));
        }
    }
    Ok(())
}

/// Profile vs. actions for each user in `users`.
pub fn user_user_pairs(texts: &[UserTexts], users: &[u32]) -> Result<PairBatch> {
    reject_duplicates("user", users.iter().copied())?;
    let (lhs, rhs) = users
        .iter()
        .map(|&u| (texts[u as usize].u_p.clone(), texts[u as usize].u_a.clone()))
        .unzip();
    Ok(PairBatch {
        kind: PairKind::UserUser,
        lhs,
        rhs,
    })
}

/// Identity fields vs. semantic fields for each POI in `pois`.
pub fn poi_poi_pairs(texts: &[PoiTexts], pois: &[u32]) -> Result<PairBatch> {
    reject_duplicates("POI", pois.iter().copied())?;
    let (lhs, rhs) = pois
        .iter()
        .map(|&p| (texts[p as usize].p_d.clone(), texts[p as usize].p_b.clone()))
        .unzip();
    Ok(PairBatch {
        kind: PairKind::PoiPoi,
        lhs,
        rhs,
    })
}

/// User text vs. POI text for every order event in `records`; click-only
/// events contribute nothing.
pub fn user_poi_pairs(users: &[UserTexts], pois: &[PoiTexts], records: &[InteractionRecord]) -> Result<PairBatch> {
    let orders: Vec<&InteractionRecord> = records.iter().filter(|r| r.order == 1).collect();
    reject_duplicates("user", orders.iter().map(|r| r.user_id.0))?;
    reject_duplicates("POI", orders.iter().map(|r| r.poi_id.0))?;
    if orders.is_empty() {
        log::warn!("no order events in window; user-POI batch is empty");
    }
    let (lhs, rhs) = orders
        .iter()
        .map(|r| (users[r.user_id.0 as usize].u.clone(), pois[r.poi_id.0 as usize].p.clone()))
        .unzip();
    Ok(PairBatch {
        kind: PairKind::UserPoi,
        lhs,
        rhs,
    })
}

/// Builds a batch of the requested kind from entity ids (users, POIs) or
/// from record indices into `records` (user-POI).
pub fn build_pairs(
    kind: PairKind,
    users: &[UserTexts],
    pois: &[PoiTexts],
    records: &[InteractionRecord],
    ids: &[u32],
) -> Result<PairBatch> {
    match kind {
        PairKind::UserUser => user_user_pairs(users, ids),
        PairKind::PoiPoi => poi_poi_pairs(pois, ids),
        PairKind::UserPoi => {
            let picked: Vec<InteractionRecord> = ids.iter().map(|&i| records[i as usize].clone()).collect();
            user_poi_pairs(users, pois, &picked)
        }
    }
}

/// Loss graph of one pair batch; `None` when the batch is too small to have
/// in-batch negatives.
pub fn pair_loss(emb: &Embedder, g: &mut Graph, vocab: &Vocab, batch: &PairBatch, tau: f64) -> Result<Option<Var>> {
    if batch.len() < 2 {
        return Ok(None);
    }
    let ctx = emb.lm.config().context_len;
    let seqs: Vec<Vec<usize>> = batch
        .lhs
        .iter()
        .chain(&batch.rhs)
        .map(|t| encode_text(vocab, t, ctx))
        .collect::<Result<_>>()?;
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (l, r) = refs.split_at(batch.len());
    let el = emb.embed_graph(g, l)?;
    let er = emb.embed_graph(g, r)?;
    Ok(Some(symmetric_info_nce(g, el, er, tau)?))
}

/// Weighted sum of the three pair losses; batches may be absent.
pub fn finetune_loss(
    emb: &Embedder,
    g: &mut Graph,
    vocab: &Vocab,
    batches: [Option<&PairBatch>; 3],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (b, &lambda) in batches.iter().zip(&cfg.lambda) {
        let Some(b) = b else { continue };
        if lambda == 0.0 {
            continue;
        }
        if let Some(l) = pair_loss(emb, g, vocab, b, cfg.tau)? {
            let l = g.scale(l, lambda)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
    }
    total.ok_or(LarrError::Empty("all pair batches"))
}

pub fn finetune_step(
    emb: &mut Embedder,
    vocab: &Vocab,
    batches: [Option<&PairBatch>; 3],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = finetune_loss(emb, &mut g, vocab, batches, cfg)?;
    let value = g.value(loss).item();
    g.backward_into(loss, &mut emb.lm.store)?;
    if let Some(c) = cfg.clip {
        emb.lm.store.clip_grad_norm(c);
    }
    emb.lm.store.adam_step(&AdamConfig::with_lr(cfg.lr))?;
    Ok(value)
}

/// Draws batches of distinct entities, cycling through shuffled orders.
#[derive(Debug)]
pub struct PairSampler {
    rng: ChaCha8Rng,
    users: Vec<u32>,
    pois: Vec<u32>,
    orders: Vec<u32>,
    cursor: [usize; 3],
    order: [Vec<u32>; 3],
}

impl PairSampler {
    pub fn new(n_users: usize, n_pois: usize, records: &[InteractionRecord], seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            users: (0..n_users as u32).collect(),
            pois: (0..n_pois as u32).collect(),
            orders: records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.order == 1)
                .map(|(i, _)| i as u32)
                .collect(),
            cursor: [usize::MAX; 3],
            order: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    fn pool(&self, k: usize) -> &[u32] {
        [&self.users, &self.pois, &self.orders][k]
    }

    /// Next `size` ids of `kind`; user-POI batches also keep users and POIs
    /// distinct within the batch.
    pub fn next(&mut self, kind: PairKind, size: usize, records: &[InteractionRecord]) -> Vec<u32> {
        let k = kind as usize;
        let pool_len = self.pool(k).len();
        if pool_len == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut used_u = BTreeSet::new();
        let mut used_p = BTreeSet::new();
        let mut scanned = 0;
        while out.len() < size.min(pool_len) && scanned < 2 * pool_len {
            if self.cursor[k] >= self.order[k].len() {
                let mut o = self.pool(k).to_vec();
                o.shuffle(&mut self.rng);
                self.order[k] = o;
                self.cursor[k] = 0;
                if !out.is_empty() {
                    // Restarting mid-batch could repeat an entity.
                    break;
                }
            }
            let id = self.order[k][self.cursor[k]];
            self.cursor[k] += 1;
            scanned += 1;
            if kind == PairKind::UserPoi {
                let r = &records[id as usize];
                if !used_u.insert(r.user_id.0) || !used_p.insert(r.poi_id.0) {
                    continue;
                }
            }
            out.push(id);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_last_losses: f64,
}

/// Runs `cfg.steps` fine-tuning steps, each drawing one batch per pair kind.
pub fn contrastive_finetune(
    emb: &mut Embedder,
    vocab: &Vocab,
    users: &[UserTexts],
    pois: &[PoiTexts],
    records: &[InteractionRecord],
    cfg: &ContrastiveConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let mut sampler = PairSampler::new(users.len(), pois.len(), records, cfg.seed);
    let mut recent = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let mut batches = Vec::new();
        for kind in [PairKind::UserUser, PairKind::PoiPoi, PairKind::UserPoi] {
            let ids = sampler.next(kind, cfg.batch_size, records);
            batches.push(build_pairs(kind, users, pois, records, &ids)?);
        }
        last = finetune_step(emb, vocab, [Some(&batches[0]), Some(&batches[1]), Some(&batches[2])], cfg)?;
        recent.push(last);
        if recent.len() > 10 {
            recent.remove(0);
        }
        if (step + 1) % 10 == 0 {
            log::info!("stage=finetune step={} loss={last:.4}", step + 1);
        }
    }
    Ok(FinetuneReport {
        steps: cfg.steps,
        final_loss: last,
        mean_last_losses: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
    })
}
