//! Text-query recall over POI descriptions.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, encode_text, Embedder};
use crate::error::{LarrError, Result};
use crate::synthworld::catalog::REGIONS;
use crate::synthworld::{PoiTexts, World};
use crate::textcodec::{keyword, KeywordedText, Vocab};

/// The planted-region probe query for `region`.
pub fn region_query(region: usize) -> Result<KeywordedText> {
    let name = REGIONS
        .get(region)
        .ok_or_else(|| LarrError::InvalidConfig(format!("region {region} out of range")))?;
    Ok(KeywordedText::new([(keyword::INTRO, format!("vacation in {name}, hot weather"))]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallHit {
    pub poi: usize,
    pub score: f64,
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub query: String,
    pub region: usize,
    pub hits: Vec<RecallHit>,
    /// Hits located in the queried region.
    pub in_region: usize,
}

/// Embeds every POI's full description and returns the `k` most similar
/// to `query` by cosine, best first (ties broken by POI index).
pub fn recall_topk(
    emb: &Embedder,
    vocab: &Vocab,
    pois: &[PoiTexts],
    query: &KeywordedText,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if pois.is_empty() {
        return Err(LarrError::Empty("POI corpus"));
    }
    let ctx = emb.lm.config().context_len;
    let q = emb.embed_seqs(&[encode_text(vocab, query, ctx)?], 1)?.remove(0);
    let seqs = pois.iter().map(|p| encode_text(vocab, &p.p, ctx)).collect::<Result<Vec<_>>>()?;
    let vecs = emb.embed_seqs(&seqs, 16)?;
    let mut scored = vecs
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((i, cosine(&q, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Runs the planted-region probe for `region` and counts top-`k` hits in it.
pub fn region_probe(world: &World, emb: &Embedder, vocab: &Vocab, pois: &[PoiTexts], region: usize, k: usize) -> Result<RecallReport> {
    let query = region_query(region)?;
    let hits = recall_topk(emb, vocab, pois, &query, k)?
        .into_iter()
        .map(|(poi, score)| RecallHit {
            poi,
            score,
            region: world.config.region_of(world.pois[poi].location),
        })
        .collect::<Vec<_>>();
    Ok(RecallReport {
        query: query.texts().join(" "),
        region,
        in_region: hits.iter().filter(|h| h.region == region).count(),
        hits,
    })
}
