//! Tiny decoder-only language model and the continual-pretraining loop.
//!
//! The pretraining objective (`pretrain_loss`, also known as the continual
//! pretraining loss) sums the negative log-likelihood of every target token
//! of an example and averages over the examples of a batch. Perplexity, in
//! contrast, is normalized per token.

use std::cell::Cell as StdCell;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use larr_nn::layers::{Builder, Init, LayerNorm, Linear, TransformerBlock};
use larr_nn::{checkpoint, AdamConfig, AttentionSpec, Graph, MaskMode, ParamId, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LarrError, Result};
use crate::textcodec::{PretrainExample, Vocab, PAD};

thread_local! {
    static THREAD_FORWARDS: StdCell<u64> = const { StdCell::new(0) };
}

/// Number of LM forward passes executed on the current thread.
pub fn lm_forward_count() -> u64 {
    THREAD_FORWARDS.with(|c| c.get())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub ff_mult: usize,
    /// Share of POI examples in the pretraining mix (the rest is generic).
    pub mix_ratio: f64,
}

impl LmConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 128,
            context_len: 256,
            vocab_size,
            ff_mult: 4,
            mix_ratio: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.context_len == 0 || self.vocab_size == 0 {
            return Err(LarrError::InvalidConfig("LM sizes must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(LarrError::InvalidConfig("model_dim must be divisible by heads".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(LarrError::InvalidConfig("mix_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Layout {
    fn build(b: &mut Builder, c: &LmConfig) -> Result<Self> {
        let d = c.model_dim;
        Ok(Self {
            tok_emb: b.tensor("lm.tok_emb", &[c.vocab_size, d], Init::FanIn(d))?,
            pos_emb: b.tensor("lm.pos_emb", &[c.context_len, d], Init::FanIn(d))?,
            blocks: (0..c.layers)
                .map(|i| TransformerBlock::new(b, &format!("lm.block{i}"), d, c.ff_mult))
                .collect::<std::result::Result<_, _>>()?,
            ln_f: LayerNorm::new(b, "lm.ln_f", d)?,
            // Zero head: an untrained model predicts the uniform distribution.
            head: Linear::with_init(b, "lm.head", d, c.vocab_size, true, Init::Zeros)?,
        })
    }
}

/// Output of a batched forward pass over right-padded sequences.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Final-layer hidden states, `[n * len, model_dim]`.
    pub hidden: Var,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl Forward {
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.len + pos
    }
}

#[derive(Debug)]
pub struct LanguageModel {
    config: LmConfig,
    layout: Layout,
    /// Parameter store; other components (the embedding projection) may add
    /// their own parameters under distinct name prefixes.
    pub store: ParamStore,
    forwards: AtomicU64,
}

impl Clone for LanguageModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            store: self.store.clone(),
            forwards: AtomicU64::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

pub const CHECKPOINT_KIND: &str = "lm";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmMeta {
    kind: String,
    config: LmConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::build(&mut Builder::fresh(&mut store, &mut rng), &config)?;
        Ok(Self {
            config,
            layout,
            store,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn from_store(config: LmConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&mut Builder::bind(&mut store), &config)?;
        Ok(Self {
            config,
            layout,
            store,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    /// Forward passes run by this instance.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn encode_checkpoint(&self, extra: serde_json::Value) -> Vec<u8> {
        let meta = LmMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            extra,
        };
        checkpoint::encode(&self.store, &serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = checkpoint::decode(bytes)?;
        let meta: LmMeta = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(LarrError::Corrupt(format!("checkpoint kind `{}` is not an LM", meta.kind)));
        }
        Ok((Self::from_store(meta.config, store)?, meta.extra))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        Ok(checkpoint::write_atomic(path, &self.encode_checkpoint(extra))?)
    }

    pub fn load(path: &Path, producer: &'static str) -> Result<(Self, serde_json::Value)> {
        if !path.exists() {
            return Err(LarrError::MissingArtifact {
                path: path.display().to_string(),
                producer,
            });
        }
        Self::decode_checkpoint(&std::fs::read(path)?)
    }

    /// Runs the causal transformer over right-padded sequences.
    pub fn forward(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Forward> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(LarrError::Empty("sequence batch"));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len > self.config.context_len {
            return invalid("lm.forward", format!("sequence length {len} exceeds context {}", self.config.context_len));
        }
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t >= self.config.vocab_size) {
            return invalid("lm.forward", format!("token id {bad} outside vocabulary of {}", self.config.vocab_size));
        }
        THREAD_FORWARDS.with(|c| c.set(c.get() + 1));
        self.forwards.fetch_add(1, Ordering::Relaxed);

        let n = seqs.len();
        let mut ids = vec![PAD; n * len];
        let mut mask = vec![false; n * len];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * len..i * len + s.len()].copy_from_slice(s);
            mask[i * len..i * len + s.len()].iter_mut().for_each(|m| *m = true);
        }
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let l = &self.layout;
        let te = g.param(&self.store, l.tok_emb)?;
        let x = g.gather_rows(te, &ids)?;
        let pe = g.param(&self.store, l.pos_emb)?;
        let p = g.gather_rows(pe, &positions)?;
        let mut x = g.add(x, p)?;
        let spec = AttentionSpec::new(n, len, self.config.heads, MaskMode::Causal).with_key_mask(mask);
        for block in &l.blocks {
            x = block.forward(g, &self.store, x, &spec)?;
        }
        let hidden = l.ln_f.forward(g, &self.store, x)?;
        Ok(Forward {
            hidden,
            len,
            lens: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        Ok(self.layout.head.forward(g, &self.store, hidden)?)
    }

    /// Builds the batch loss graph. `items` are `(sequence, loss_start)`:
    /// tokens at index `>= loss_start` are targets. Returns the loss variable
    /// and the number of target tokens.
    pub fn loss_graph(&self, g: &mut Graph, items: &[(&[usize], usize)], weight: f64) -> Result<(Var, usize)> {
        let seqs: Vec<&[usize]> = items.iter().map(|(s, _)| *s).collect();
        let fwd = self.forward(g, &seqs)?;
        let logits = self.logits(g, fwd.hidden)?;
        let rows = items.len() * fwd.len;
        let mut targets = vec![0usize; rows];
        let mut weights = vec![0.0; rows];
        let mut count = 0;
        for (i, (s, start)) in items.iter().enumerate() {
            for t in (*start).max(1)..s.len() {
                let r = fwd.row(i, t - 1);
                targets[r] = s[t];
                weights[r] = weight;
                count += 1;
            }
        }
        Ok((g.cross_entropy(logits, &targets, &weights)?, count))
    }

    /// Sum over the batch of per-example target NLL, divided by batch size.
    pub fn pretrain_loss(&self, g: &mut Graph, batch: &[(&[usize], usize)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(LarrError::Empty("batch"));
        }
        Ok(self.loss_graph(g, batch, 1.0 / batch.len() as f64)?.0)
    }

    /// One optimizer step on `batch`; returns the loss value.
    pub fn pretrain_step(&mut self, batch: &[(&[usize], usize)], adam: &AdamConfig, clip: Option<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.pretrain_loss(&mut g, batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(larr_nn::NnError::NonFinite("pretrain loss").into());
        }
        g.backward_into(loss, &mut self.store)?;
        if let Some(c) = clip {
            self.store.clip_grad_norm(c);
        }
        self.store.adam_step(adam)?;
        Ok(value)
    }

    /// Greedy decoding from `prefix` until `stop` or `max_len` new tokens.
    pub fn generate(&self, prefix: &[usize], max_len: usize, stop: Option<usize>) -> Result<Vec<usize>> {
        if prefix.len() > self.config.context_len {
            return invalid("generate", "prefix longer than context");
        }
        let mut seq = prefix.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < self.config.context_len {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &[&seq])?;
            let last = g.gather_rows(fwd.hidden, &[seq.len() - 1])?;
            let logits = self.logits(&mut g, last)?;
            let row = g.value(logits).row(0);
            let next = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            out.push(next);
            seq.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(out)
    }

    /// Total target NLL and token count over `items`, evaluated in chunks.
    pub fn nll(&self, items: &[(&[usize], usize)], batch_size: usize) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in items.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let (loss, n) = self.loss_graph(&mut g, chunk, 1.0)?;
            total += g.value(loss).item();
            count += n;
        }
        Ok((total, count))
    }

    /// `exp` of the mean per-token negative log-likelihood of target tokens.
    pub fn perplexity(&self, items: &[(&[usize], usize)], batch_size: usize) -> Result<f64> {
        let (total, count) = self.nll(items, batch_size)?;
        if count == 0 {
            return Err(LarrError::Empty("perplexity targets"));
        }
        Ok((total / count as f64).exp())
    }
}

/// Right-truncates `y` so that `x ++ y` fits the context; `x` is never cut.
pub fn fit_example(ex: &PretrainExample, context_len: usize) -> Result<(Vec<usize>, usize)> {
    if ex.x.len() >= context_len {
        return invalid("fit_example", format!("prompt of {} tokens does not fit context {context_len}", ex.x.len()));
    }
    let (mut seq, start) = ex.joined();
    seq.truncate(context_len);
    Ok((seq, start))
}

/// Synthetic filler text standing in for a general-domain corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericCorpus {
    pub lines: Vec<String>,
}

const SUBJECTS: &[&str] = &[
    "the old library", "a quiet river", "my neighbour", "the morning train", "a small garden",
    "the city council", "our teacher", "the mountain road", "a curious child", "the night market",
    "the weather report", "a local band", "the museum guide", "an early bus", "the harbour",
];
const VERBS: &[&str] = &[
    "opens", "waits near", "talks about", "passes", "looks at", "remembers", "cleans", "follows",
    "paints", "visits", "describes", "measures",
];
const OBJECTS: &[&str] = &[
    "the bridge", "a long story", "the park bench", "the second floor", "a paper map",
    "the east gate", "a wooden table", "the football field", "an empty street", "the school yard",
    "a bright window", "the bicycle lane",
];
const TAILS: &[&str] = &[
    "every day", "after the rain", "before sunset", "with a smile", "in the spring",
    "on weekends", "without hurry", "for an hour", "near the corner", "at noon",
];

impl GenericCorpus {
    pub fn synthesize(n_lines: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut pick = |xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
        let lines = (0..n_lines)
            .map(|_| format!("{} {} {} {}.", pick(SUBJECTS), pick(VERBS), pick(OBJECTS), pick(TAILS)))
            .collect();
        Self { lines }
    }

    /// Each line becomes a sequence predicted from its first character on.
    pub fn encode(&self, vocab: &Vocab, context_len: usize) -> Vec<(Vec<usize>, usize)> {
        self.lines
            .iter()
            .map(|l| {
                let mut s = vocab.encode(l);
                s.truncate(context_len);
                (s, 1)
            })
            .filter(|(s, _)| s.len() >= 2)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-4,
            batch_size: 16,
            clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub poi_examples: usize,
    pub generic_examples: usize,
    pub final_loss: f64,
    pub mean_last_losses: f64,
}

/// Selects the epoch mix: `mix_ratio` of the examples come from the POI
/// corpus and the rest from the generic corpus, keeping the total equal to
/// the combined corpus size.
pub fn mix_corpora(
    poi: &[(Vec<usize>, usize)],
    generic: &[(Vec<usize>, usize)],
    mix_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<(Vec<usize>, usize)>, usize) {
    let total = poi.len() + generic.len();
    let want_poi = if poi.is_empty() { 0 } else { (total as f64 * mix_ratio).round() as usize };
    let want_gen = if generic.is_empty() { 0 } else { total - want_poi.min(total) };
    let mut take = |src: &[(Vec<usize>, usize)], n: usize| -> Vec<(Vec<usize>, usize)> {
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.shuffle(rng);
        (0..n).map(|i| src[idx[i % src.len()]].clone()).collect()
    };
    let mut out = take(poi, want_poi);
    out.extend(take(generic, want_gen));
    (out, want_poi)
}

/// Continual pretraining over the mixed corpus with length-bucketed batches.
pub fn continual_pretrain(
    model: &mut LanguageModel,
    poi: &[(Vec<usize>, usize)],
    generic: &[(Vec<usize>, usize)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(LarrError::InvalidConfig("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut report = PretrainReport {
        steps: 0,
        poi_examples: 0,
        generic_examples: 0,
        final_loss: f64::NAN,
        mean_last_losses: f64::NAN,
    };
    let mut recent = Vec::new();
    let started = Instant::now();
    let mut tokens = 0usize;
    for epoch in 0..cfg.epochs {
        let (mixed, n_poi) = mix_corpora(poi, generic, model.config.mix_ratio, &mut rng);
        report.poi_examples += n_poi;
        report.generic_examples += mixed.len() - n_poi;
        if mixed.is_empty() {
            return Err(LarrError::Empty("pretraining corpus"));
        }
        let mut order: Vec<usize> = (0..mixed.len()).collect();
        order.shuffle(&mut rng);
        // Length bucketing: sort shuffled chunks by length, then shuffle batches.
        let window = cfg.batch_size * 16;
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for chunk in order.chunks(window) {
            let mut c = chunk.to_vec();
            c.sort_by_key(|&i| mixed[i].0.len());
            batches.extend(c.chunks(cfg.batch_size).map(|b| b.to_vec()));
        }
        batches.shuffle(&mut rng);
        for b in &batches {
            let items: Vec<(&[usize], usize)> = b.iter().map(|&i| (mixed[i].0.as_slice(), mixed[i].1)).collect();
            let loss = model.pretrain_step(&items, &adam, cfg.clip)?;
            tokens += items.iter().map(|(s, _)| s.len()).sum::<usize>();
            report.steps += 1;
            report.final_loss = loss;
            recent.push(loss);
            if recent.len() > 20 {
                recent.remove(0);
            }
            if report.steps % 20 == 0 {
                let secs = started.elapsed().as_secs_f64().max(1e-9);
                log::info!(
                    "stage=pretrain epoch={epoch} step={} loss={loss:.4} tokens_per_sec={:.0}",
                    report.steps,
                    tokens as f64 / secs
                );
            }
        }
    }
    report.mean_last_losses = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> LmConfig {
        LmConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            context_len: 32,
            vocab_size: vocab,
            ff_mult: 2,
            mix_ratio: 0.1,
        }
    }

    #[test]
    fn untrained_loss_is_log_vocab() {
        let m = LanguageModel::new(tiny(20), 1).unwrap();
        let seq: Vec<usize> = (0..10).map(|i| 2 + i % 15).collect();
        let (nll, n) = m.nll(&[(&seq, 1)], 4).unwrap();
        assert!((nll / n as f64 - (20f64).ln()).abs() < 1e-2);
        let ppl = m.perplexity(&[(&seq, 1)], 4).unwrap();
        assert!((ppl - 20.0).abs() < 0.2);
    }

    #[test]
    fn degenerate_vocab_zero_loss() {
        let m = LanguageModel::new(tiny(1), 1).unwrap();
        let seq = vec![0usize; 6];
        let mut g = Graph::new();
        let l = m.pretrain_loss(&mut g, &[(&seq, 2)]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = LanguageModel::new(tiny(8), 1).unwrap();
        let mut g = Graph::new();
        assert!(m.pretrain_loss(&mut g, &[]).is_err());
    }

    #[test]
    fn mix_zero_has_no_poi() {
        let poi = vec![(vec![2, 3, 4], 1); 5];
        let gen = vec![(vec![5, 6, 7], 1); 20];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mixed, n_poi) = mix_corpora(&poi, &gen, 0.0, &mut rng);
        assert_eq!((mixed.len(), n_poi), (25, 0));
        assert!(mixed.iter().all(|(s, _)| s[0] == 5));
    }

    #[test]
    fn generate_zero_len_is_empty() {
        let m = LanguageModel::new(tiny(8), 1).unwrap();
        assert!(m.generate(&[2, 3], 0, None).unwrap().is_empty());
        assert!(m.generate(&vec![2; 40], 1, None).is_err());
    }

    #[test]
    fn forward_counters() {
        let m = LanguageModel::new(tiny(8), 1).unwrap();
        let before = lm_forward_count();
        let mut g = Graph::new();
        m.forward(&mut g, &[&[2, 3]]).unwrap();
        assert_eq!(lm_forward_count(), before + 1);
        assert_eq!(m.forward_count(), 1);
    }

    #[test]
    fn truncation_keeps_prompt() {
        let ex = PretrainExample {
            x: vec![2, 3, 4],
            y: vec![5; 10],
        };
        let (s, start) = fit_example(&ex, 6).unwrap();
        assert_eq!(s, vec![2, 3, 4, 5, 5, 5]);
        assert_eq!(start, 3);
        assert!(fit_example(&ex, 3).is_err());
    }
}
