//! Offline scene-feature embeddings.
//!
//! Each request is described by [`R`] short scene texts (weather, mealtime,
//! location, ...). Every distinct text is wrapped with the marker pair of its
//! slot's keyword, run once through the frozen LM, and the final hidden state
//! at the closing marker is stored. Serving only reads the cache.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use larr_nn::{checkpoint::write_atomic, Graph};
use serde::{Deserialize, Serialize};

use crate::digest::sha256_raw;
use crate::embed::Embedder;
use crate::error::{invalid, LarrError, Result};
use crate::lm::LanguageModel;
use crate::synthworld::catalog::{temperature_bin, CUISINES, REGIONS, TEMPERATURE_BINS, TIMESLOTS, WEATHERS};
use crate::synthworld::{Action, Cell, Context, InteractionRecord, PoiRecord, UserRecord, World};
use crate::synthworld::{render_poi_description, render_user_texts};
use crate::textcodec::{canonicalize, keyword, Vocab};

/// Number of scene features per request.
pub const R: usize = 10;

pub const MAGIC: &[u8; 8] = b"LARRCACH";
pub const VERSION: u32 = 1;

/// Slot names, indexed by feature index.
pub const FEATURE_NAMES: [&str; R] = [
    "weather",
    "mealtime",
    "location",
    "temperature",
    "day_type",
    "home_match",
    "user_actions",
    "user_activity",
    "poi_tag",
    "poi_stats",
];

/// Keyword whose marker pair wraps each slot's text.
pub const FEATURE_KEYWORDS: [usize; R] = [
    keyword::ACTIONS,
    keyword::ACTIONS,
    keyword::LOCATION,
    keyword::ACTIONS,
    keyword::ACTIONS,
    keyword::PROFILE,
    keyword::ACTIONS,
    keyword::PROFILE,
    keyword::TAG,
    keyword::STATS,
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneFeatureKey {
    pub index: usize,
    pub text: String,
}

impl SceneFeatureKey {
    pub fn new(index: usize, text: &str) -> Self {
        Self {
            index,
            text: canonicalize(text),
        }
    }

    fn encoded(&self) -> String {
        format!("{}|{}", self.index, self.text)
    }

    fn parse(s: &str) -> Result<Self> {
        let (i, t) = s
            .split_once('|')
            .ok_or_else(|| LarrError::Corrupt(format!("cache key `{s}`")))?;
        let index = i.parse().map_err(|_| LarrError::Corrupt(format!("cache key `{s}`")))?;
        Ok(Self {
            index,
            text: t.to_string(),
        })
    }
}

fn weather_text(w: usize) -> String {
    format!("{} weather", WEATHERS[w].name)
}

fn mealtime_text(t: usize) -> String {
    format!("{} time", TIMESLOTS[t])
}

fn cell_text(c: Cell) -> String {
    format!("cell ({},{})", c.x, c.y)
}

fn temperature_text(bin: usize) -> String {
    format!("{} temperature", TEMPERATURE_BINS[bin].1)
}

fn day_text(weekend: bool) -> String {
    if weekend { "weekend" } else { "weekday" }.to_string()
}

fn home_text(world: &World, user: &UserRecord, ctx: &Context) -> String {
    let region = world.config.region_name(ctx.cell);
    if ctx.cell == user.profile.home {
        format!("at home in {region}")
    } else {
        format!("away from home in {region}")
    }
}

fn activity_text(user: &UserRecord) -> String {
    let orders = user.history.iter().filter(|e| e.action == Action::Order).count();
    format!("{} clicks, {} orders", user.history.len(), orders)
}

fn poi_tag_text(poi: &PoiRecord) -> String {
    CUISINES[poi.cuisine].tag.to_string()
}

/// The per-user snapshot texts (actions and activity). These are cached per
/// user and refreshed only when the cache is rebuilt.
fn user_texts(world: &World, user: &UserRecord) -> (String, String) {
    let (_, u_a) = render_user_texts(world, user);
    (u_a.slices[0].text.clone(), activity_text(user))
}

/// Renders the scene texts of one request.
pub fn scene_texts(world: &World, user: &UserRecord, poi: &PoiRecord, ctx: &Context) -> [String; R] {
    let (actions, activity) = user_texts(world, user);
    let stats = render_poi_description(poi).slices[keyword::STATS].text.clone();
    [
        weather_text(ctx.weather),
        mealtime_text(ctx.timeslot),
        cell_text(ctx.cell),
        temperature_text(temperature_bin(ctx.temperature)),
        day_text(ctx.weekend),
        home_text(world, user, ctx),
        actions,
        activity,
        poi_tag_text(poi),
        stats,
    ]
}

pub fn scene_keys(world: &World, record: &InteractionRecord) -> [SceneFeatureKey; R] {
    let texts = scene_texts(world, world.user(record.user_id), world.poi(record.poi_id), &record.context);
    std::array::from_fn(|i| SceneFeatureKey::new(i, &texts[i]))
}

/// Every value each slot can take in `world`: all weather, mealtime, cell,
/// temperature-bin, day-type and home-match phrases plus each user's and each
/// POI's own texts.
pub fn feature_universe(world: &World) -> Vec<(usize, String)> {
    let cfg = &world.config;
    let mut out = Vec::new();
    out.extend((0..cfg.n_weather).map(|w| (0, weather_text(w))));
    out.extend((0..cfg.n_timeslots).map(|t| (1, mealtime_text(t))));
    let g = cfg.grid_size as u8;
    for y in 0..g {
        for x in 0..g {
            out.push((2, cell_text(Cell { x, y })));
        }
    }
    out.extend((0..TEMPERATURE_BINS.len()).map(|b| (3, temperature_text(b))));
    out.extend([false, true].map(|w| (4, day_text(w))));
    let used_regions: Vec<usize> = {
        let mut r: Vec<usize> = (0..g)
            .flat_map(|y| (0..g).map(move |x| Cell { x, y }))
            .map(|c| cfg.region_of(c))
            .collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    for r in used_regions {
        out.push((5, format!("at home in {}", REGIONS[r])));
        out.push((5, format!("away from home in {}", REGIONS[r])));
    }
    for u in &world.users {
        let (actions, activity) = user_texts(world, u);
        out.push((6, actions));
        out.push((7, activity));
    }
    for p in &world.pois {
        out.push((8, poi_tag_text(p)));
        out.push((9, render_poi_description(p).slices[keyword::STATS].text.clone()));
    }
    out
}

/// Deduplicates a universe by canonical key. Two raw texts that collapse to
/// the same key are reported as an error, since they would share a vector.
pub fn canonical_universe(universe: &[(usize, String)]) -> Result<Vec<SceneFeatureKey>> {
    let mut seen: BTreeMap<SceneFeatureKey, &str> = BTreeMap::new();
    for (k, text) in universe {
        if *k >= R {
            return invalid("build_cache", format!("feature index {k} outside 0..{R}"));
        }
        let key = SceneFeatureKey::new(*k, text);
        match seen.get(&key) {
            Some(prev) if *prev != text.as_str() => {
                return invalid(
                    "build_cache",
                    format!("texts `{prev}` and `{text}` collide as feature {k} key `{}`", key.text),
                )
            }
            Some(_) => {}
            None => {
                seen.insert(key, text);
            }
        }
    }
    Ok(seen.into_keys().collect())
}

/// Which representation of the frozen model is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorSource {
    /// Final-layer hidden state at the closing marker.
    #[default]
    Hidden,
    /// The same state passed through the embedder's projection.
    Projected,
}

/// Frozen feature extractor over an LM (and optionally its projection).
pub struct Extractor<'a> {
    lm: &'a LanguageModel,
    embedder: Option<&'a Embedder>,
    vocab: &'a Vocab,
}

impl<'a> Extractor<'a> {
    pub fn hidden(lm: &'a LanguageModel, vocab: &'a Vocab) -> Self {
        Self {
            lm,
            embedder: None,
            vocab,
        }
    }

    pub fn projected(embedder: &'a Embedder, vocab: &'a Vocab) -> Self {
        Self {
            lm: &embedder.lm,
            embedder: Some(embedder),
            vocab,
        }
    }

    pub fn source(&self) -> VectorSource {
        match self.embedder {
            Some(_) => VectorSource::Projected,
            None => VectorSource::Hidden,
        }
    }

    pub fn dim(&self) -> usize {
        match self.embedder {
            Some(e) => e.d_emb(),
            None => self.lm.config().model_dim,
        }
    }

    fn wrap(&self, key: &SceneFeatureKey) -> Result<Vec<usize>> {
        let (b, e) = self.vocab.registry().pair(FEATURE_KEYWORDS[key.index])?;
        let mut seq = vec![b];
        seq.extend(self.vocab.encode(&key.text));
        let max = self.lm.config().context_len;
        if seq.len() + 1 > max {
            seq.truncate(max - 1);
        }
        seq.push(e);
        Ok(seq)
    }

    /// Vectors for `keys`, evaluated in padded batches.
    pub fn extract(&self, keys: &[SceneFeatureKey], batch: usize) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<Vec<usize>> = keys.iter().map(|k| self.wrap(k)).collect::<Result<_>>()?;
        // Batch similar lengths together to limit padding; order restored below.
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| seqs[i].len());
        let mut out = vec![Vec::new(); seqs.len()];
        for chunk in order.chunks(batch.max(1)) {
            let refs: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut g = Graph::new();
            let v = match self.embedder {
                Some(e) => e.embed_graph(&mut g, &refs)?,
                None => {
                    let fwd = self.lm.forward(&mut g, &refs)?;
                    let rows: Vec<usize> = fwd.lens.iter().enumerate().map(|(i, &l)| fwd.row(i, l - 1)).collect();
                    g.gather_rows(fwd.hidden, &rows)?
                }
            };
            let t = g.value(v);
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = t.row(r).to_vec();
            }
        }
        Ok(out)
    }

    /// Single-feature extraction: one unbatched forward pass.
    pub fn extract_feature_embedding(&self, text: &str, index: usize) -> Result<Vec<f64>> {
        if index >= R {
            return invalid("extract_feature_embedding", format!("feature index {index} outside 0..{R}"));
        }
        Ok(self.extract(&[SceneFeatureKey::new(index, text)], 1)?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub d_emb: usize,
    /// Digest of the model checkpoint the vectors were extracted from.
    pub digest: [u8; 32],
    pub created: u64,
    keys: Vec<SceneFeatureKey>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<SceneFeatureKey, usize>,
}

/// Creation timestamp: `SOURCE_DATE_EPOCH` when set, otherwise 0, so that
/// rebuilding with identical inputs yields identical bytes.
pub fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

impl EmbeddingCache {
    pub fn from_entries(
        d_emb: usize,
        digest: [u8; 32],
        created: u64,
        entries: Vec<(SceneFeatureKey, Vec<f64>)>,
    ) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut keys = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (k, v) in entries {
            if v.len() != d_emb {
                return invalid("cache", format!("vector of dim {} in a {d_emb}-dim cache", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return invalid("cache", "non-finite vector");
            }
            if index.insert(k.clone(), keys.len()).is_some() {
                return invalid("cache", format!("duplicate key {}", k.encoded()));
            }
            keys.push(k);
            vectors.push(v);
        }
        Ok(Self {
            d_emb,
            digest,
            created,
            keys,
            vectors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[SceneFeatureKey] {
        &self.keys
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    pub fn position(&self, key: &SceneFeatureKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Stored vector, or `None` on a miss.
    pub fn lookup(&self, key: &SceneFeatureKey) -> Option<&[f64]> {
        self.position(key).map(|i| self.vectors[i].as_slice())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_emb as u32).to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.created.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (k, v) in self.keys.iter().zip(&self.vectors) {
            let key = k.encoded();
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| LarrError::Corrupt(format!("embedding cache: {m}"));
        if bytes.len() < 8 + 4 + 4 + 32 + 8 + 8 + 4 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let d_emb = r.u32()? as usize;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let created = r.u64()?;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("key is not UTF-8"))?;
            let key = SceneFeatureKey::parse(key)?;
            let raw = r.take(d_emb * 8)?;
            let v = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((key, v));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Self::from_entries(d_emb, digest, created, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, &self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LarrError::MissingArtifact {
                path: path.display().to_string(),
                producer: "build-cache",
            });
        }
        Self::decode(&std::fs::read(path)?)
    }

    /// Loads and checks that the cache came from the expected model.
    pub fn load_verified(path: &Path, expected_digest: &str) -> Result<Self> {
        let c = Self::load(path)?;
        c.verify(expected_digest)?;
        Ok(c)
    }

    pub fn verify(&self, expected_digest: &str) -> Result<()> {
        if self.digest_hex() != expected_digest {
            return Err(LarrError::DigestMismatch {
                what: "embedding cache model",
                expected: expected_digest.to_string(),
                found: self.digest_hex(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LarrError::Corrupt("embedding cache: truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Extracts one vector per distinct key of `universe`.
pub fn build_cache(
    universe: &[(usize, String)],
    extractor: &Extractor,
    model_digest: [u8; 32],
    batch: usize,
) -> Result<EmbeddingCache> {
    let keys = canonical_universe(universe)?;
    if keys.is_empty() {
        return Err(LarrError::Empty("feature universe"));
    }
    let vectors = extractor.extract(&keys, batch)?;
    EmbeddingCache::from_entries(extractor.dim(), model_digest, creation_time(), keys.into_iter().zip(vectors).collect())
}

/// Digest identifying a model checkpoint's bytes.
pub fn model_digest(checkpoint_bytes: &[u8]) -> [u8; 32] {
    sha256_raw(checkpoint_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize, t: &str) -> SceneFeatureKey {
        SceneFeatureKey::new(i, t)
    }

    fn cache() -> EmbeddingCache {
        EmbeddingCache::from_entries(
            2,
            [7; 32],
            0,
            vec![
                (key(0, "sunny weather"), vec![1.0, 2.0]),
                (key(1, "lunch time"), vec![3.0, 4.0]),
                (key(2, "cell (0,0)"), vec![5.0, 6.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_and_lookup() {
        let c = cache();
        let d = EmbeddingCache::decode(&c.encode()).unwrap();
        assert_eq!(d, c);
        assert_eq!(d.len(), 3);
        assert_eq!(d.lookup(&key(1, "lunch time")).unwrap(), &[3.0, 4.0]);
        assert!(d.lookup(&key(1, "dinner time")).is_none());
        assert!(d.lookup(&key(0, "lunch time")).is_none());
    }

    #[test]
    fn corruption_detected() {
        let bytes = cache().encode();
        for i in [0, 20, 70, bytes.len() - 10, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(EmbeddingCache::decode(&b).is_err(), "flip at {i}");
        }
        assert!(EmbeddingCache::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn digest_mismatch_is_error() {
        let c = cache();
        assert!(c.verify(&hex::encode([7u8; 32])).is_ok());
        assert!(matches!(c.verify(&hex::encode([8u8; 32])), Err(LarrError::DigestMismatch { .. })));
    }

    #[test]
    fn canonical_collisions() {
        let ok = canonical_universe(&[(0, "a b".into()), (0, "a b".into()), (1, "a b".into())]).unwrap();
        assert_eq!(ok.len(), 2);
        assert!(canonical_universe(&[(0, "a b".into()), (0, "a  b".into())]).is_err());
        assert!(canonical_universe(&[(R, "x".into())]).is_err());
    }
}
