//! Character-level tokenizer with paired begin/end keyword markers.
//!
//! Every entity description is a [`KeywordedText`]: an ordered list of slices,
//! each tagged with a keyword index. Wrapping surrounds slice `k` with the
//! `<bos_k>` / `<eos_k>` pair so the language model always knows which field
//! it is reading or writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LarrError, Result};

/// Keyword indices. POI keywords come first, user keywords follow.
pub mod keyword {
    pub const NAME: usize = 0;
    pub const LOCATION: usize = 1;
    pub const TAG: usize = 2;
    pub const INTRO: usize = 3;
    pub const MENU: usize = 4;
    pub const STATS: usize = 5;
    pub const PROFILE: usize = 6;
    pub const ACTIONS: usize = 7;

    pub const POI_NAMES: [&str; 6] = ["name", "location", "tag", "intro", "menu", "stats"];
    pub const USER_NAMES: [&str; 2] = ["profile", "actions"];
    /// Highest POI keyword index.
    pub const POI_MAX: usize = STATS;
    pub const POI_RANGE: std::ops::RangeInclusive<usize> = NAME..=STATS;
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const REPLACEMENT: char = '\u{FFFD}';
pub const MANIFEST_HEADER: &str = "larr-vocab";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub keyword: usize,
    pub text: String,
}

/// An entity description cut into keyword slices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeywordedText {
    pub slices: Vec<Slice>,
}

impl KeywordedText {
    pub fn new(slices: impl IntoIterator<Item = (usize, String)>) -> Self {
        Self {
            slices: slices
                .into_iter()
                .map(|(keyword, text)| Slice { keyword, text })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.slices.iter().map(|s| s.text.as_str()).collect()
    }

    /// Concatenation preserving slice order.
    pub fn concat(&self, other: &KeywordedText) -> KeywordedText {
        let mut slices = self.slices.clone();
        slices.extend(other.slices.iter().cloned());
        KeywordedText { slices }
    }

    pub fn select(&self, keywords: &[usize]) -> KeywordedText {
        KeywordedText {
            slices: keywords
                .iter()
                .filter_map(|k| self.slices.iter().find(|s| s.keyword == *k).cloned())
                .collect(),
        }
    }
}

/// Ids of the keyword marker pairs and the aggregation token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenRegistry {
    pub poi_pairs: Vec<(usize, usize)>,
    pub user_pairs: Vec<(usize, usize)>,
    pub agg_token: usize,
}

impl SpecialTokenRegistry {
    /// Allocates ids right after the reserved pad/unk ids: POI pairs for
    /// keyword indices `0..=n_k`, then `n_q` user pairs, then `<agg>`.
    pub fn new(n_k: usize, n_q: usize) -> Self {
        let mut next = UNK + 1;
        let mut pair = || {
            let p = (next, next + 1);
            next += 2;
            p
        };
        let poi_pairs = (0..=n_k).map(|_| pair()).collect();
        let user_pairs = (0..n_q).map(|_| pair()).collect();
        Self {
            poi_pairs,
            user_pairs,
            agg_token: next,
        }
    }

    /// The registry used throughout the pipeline: six POI keywords and two
    /// user keywords.
    pub fn standard() -> Self {
        Self::new(keyword::POI_MAX, keyword::USER_NAMES.len())
    }

    pub fn n_pairs(&self) -> usize {
        self.poi_pairs.len() + self.user_pairs.len()
    }

    pub fn pair(&self, k: usize) -> Result<(usize, usize)> {
        if k < self.poi_pairs.len() {
            Ok(self.poi_pairs[k])
        } else if k - self.poi_pairs.len() < self.user_pairs.len() {
            Ok(self.user_pairs[k - self.poi_pairs.len()])
        } else {
            invalid("registry", format!("no keyword pair {k}"))
        }
    }

    pub fn bos(&self, k: usize) -> Result<usize> {
        self.pair(k).map(|p| p.0)
    }

    pub fn eos(&self, k: usize) -> Result<usize> {
        self.pair(k).map(|p| p.1)
    }

    /// Index of the last POI keyword (`n_k`).
    pub fn last_poi_keyword(&self) -> usize {
        self.poi_pairs.len() - 1
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.poi_pairs
            .iter()
            .chain(&self.user_pairs)
            .flat_map(|&(b, e)| [b, e])
            .chain(std::iter::once(self.agg_token))
    }

    /// `Some((k, is_bos))` when `id` is a keyword marker.
    pub fn classify(&self, id: usize) -> Option<(usize, bool)> {
        self.poi_pairs
            .iter()
            .chain(&self.user_pairs)
            .enumerate()
            .find_map(|(k, &(b, e))| match id {
                _ if id == b => Some((k, true)),
                _ if id == e => Some((k, false)),
                _ => None,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Pad,
    Unk,
    Bos(usize),
    Eos(usize),
    Agg,
    Char(char),
}

/// Bijective token <-> id map: reserved ids, registry ids, then characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    registry: SpecialTokenRegistry,
    chars: Vec<char>,
    char_ids: BTreeMap<char, usize>,
    base: usize,
}

impl Vocab {
    /// Builds the base character set from `corpus`, keeping the `max_size`
    /// most frequent characters (ties broken by code point) when given.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        max_size: Option<usize>,
        registry: SpecialTokenRegistry,
    ) -> Result<Self> {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for line in corpus {
            for c in line.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(LarrError::Empty("corpus"));
        }
        let mut chars: Vec<char> = counts.keys().copied().collect();
        if let Some(max) = max_size {
            let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(max);
            chars = ranked.into_iter().map(|(c, _)| c).collect();
            chars.sort_unstable();
        }
        Ok(Self::from_chars(chars, registry))
    }

    fn from_chars(chars: Vec<char>, registry: SpecialTokenRegistry) -> Self {
        let base = registry.agg_token + 1;
        let char_ids = chars.iter().enumerate().map(|(i, &c)| (c, base + i)).collect();
        Self {
            registry,
            chars,
            char_ids,
            base,
        }
    }

    pub fn registry(&self) -> &SpecialTokenRegistry {
        &self.registry
    }

    pub fn size(&self) -> usize {
        self.base + self.chars.len()
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    pub fn role(&self, id: usize) -> Option<TokenRole> {
        match id {
            PAD => Some(TokenRole::Pad),
            UNK => Some(TokenRole::Unk),
            _ if id == self.registry.agg_token => Some(TokenRole::Agg),
            _ if id >= self.base => self.chars.get(id - self.base).map(|&c| TokenRole::Char(c)),
            _ => self.registry.classify(id).map(|(k, bos)| {
                if bos {
                    TokenRole::Bos(k)
                } else {
                    TokenRole::Eos(k)
                }
            }),
        }
    }

    pub fn token_string(&self, id: usize) -> String {
        match self.role(id) {
            Some(TokenRole::Pad) => "<pad>".into(),
            Some(TokenRole::Unk) => "<unk>".into(),
            Some(TokenRole::Agg) => "<agg>".into(),
            Some(TokenRole::Bos(k)) => format!("<bos_{k}>"),
            Some(TokenRole::Eos(k)) => format!("<eos_{k}>"),
            Some(TokenRole::Char(c)) => c.to_string(),
            None => "<invalid>".into(),
        }
    }

    /// Decodes character ids; unknown ids render as U+FFFD, special markers
    /// as their bracketed names.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match self.role(id) {
                Some(TokenRole::Char(c)) => c.to_string(),
                Some(TokenRole::Unk) | None => REPLACEMENT.to_string(),
                _ => self.token_string(id),
            })
            .collect()
    }

    /// Line-oriented manifest: a header line, then `id<TAB>role<TAB>token`
    /// with the token JSON-quoted.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER} {MANIFEST_VERSION}\n");
        let _ = writeln!(
            out,
            "registry\t{}\t{}",
            self.registry.poi_pairs.len(),
            self.registry.user_pairs.len()
        );
        for id in 0..self.size() {
            let role = match self.role(id) {
                Some(TokenRole::Pad) => "pad",
                Some(TokenRole::Unk) => "unk",
                Some(TokenRole::Agg) => "agg",
                Some(TokenRole::Bos(_)) => "bos",
                Some(TokenRole::Eos(_)) => "eos",
                Some(TokenRole::Char(_)) => "char",
                None => "invalid",
            };
            let tok = serde_json::to_string(&self.token_string(id)).expect("string serializes");
            let _ = writeln!(out, "{id}\t{role}\t{tok}");
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: &str| LarrError::Corrupt(format!("vocab manifest: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        if header != format!("{MANIFEST_HEADER} {MANIFEST_VERSION}") {
            return Err(bad("unsupported header"));
        }
        let reg: Vec<&str> = lines.next().ok_or_else(|| bad("missing registry"))?.split('\t').collect();
        if reg.len() != 3 || reg[0] != "registry" {
            return Err(bad("registry line"));
        }
        let n_poi: usize = reg[1].parse().map_err(|_| bad("registry count"))?;
        let n_user: usize = reg[2].parse().map_err(|_| bad("registry count"))?;
        if n_poi == 0 {
            return Err(bad("registry without POI pairs"));
        }
        let registry = SpecialTokenRegistry::new(n_poi - 1, n_user);
        let mut chars = Vec::new();
        for (expect, line) in lines.enumerate() {
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            if parts.len() != 3 || parts[0].parse::<usize>().ok() != Some(expect) {
                return Err(bad("entry line"));
            }
            if parts[1] == "char" {
                let tok: String = serde_json::from_str(parts[2]).map_err(|_| bad("token"))?;
                let mut it = tok.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => chars.push(c),
                    _ => return Err(bad("char token")),
                }
            }
        }
        let v = Self::from_chars(chars, registry);
        if v.to_manifest() != text {
            return Err(bad("manifest does not round-trip"));
        }
        Ok(v)
    }
}

/// Wraps each slice with its keyword markers, checking that the slices cover
/// exactly `range` in order.
pub fn wrap_keywords(text: &KeywordedText, range: RangeInclusive<usize>, vocab: &Vocab) -> Result<Vec<usize>> {
    let expected = range.clone().count();
    if text.len() != expected {
        return Err(LarrError::Arity {
            expected,
            got: text.len(),
        });
    }
    for (slice, k) in text.slices.iter().zip(range) {
        if slice.keyword != k {
            return invalid("wrap_keywords", format!("slice keyword {} where {k} expected", slice.keyword));
        }
    }
    wrap_slices(text, vocab)
}

/// Wraps slices using their own keyword indices, in the given order.
pub fn wrap_slices(text: &KeywordedText, vocab: &Vocab) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in &text.slices {
        let (b, e) = vocab.registry().pair(s.keyword)?;
        out.push(b);
        out.extend(vocab.encode(&s.text));
        out.push(e);
    }
    Ok(out)
}

/// Inverse of [`wrap_slices`] on well-formed sequences.
pub fn unwrap_keywords(tokens: &[usize], vocab: &Vocab) -> Result<KeywordedText> {
    let mut slices = Vec::new();
    let mut open: Option<(usize, Vec<usize>)> = None;
    for &id in tokens {
        match (vocab.role(id), open.take()) {
            (Some(TokenRole::Bos(k)), None) => open = Some((k, Vec::new())),
            (Some(TokenRole::Eos(k)), Some((ok, body))) if k == ok => slices.push(Slice {
                keyword: k,
                text: vocab.decode(&body),
            }),
            (Some(TokenRole::Char(_) | TokenRole::Unk), Some((k, mut body))) => {
                body.push(id);
                open = Some((k, body));
            }
            (role, _) => return Err(LarrError::Malformed(format!("unexpected token {id} ({role:?})"))),
        }
    }
    if open.is_some() {
        return Err(LarrError::Malformed("unterminated slice".into()));
    }
    Ok(KeywordedText { slices })
}

/// Prompt/target pair for continual pretraining: name and location predict
/// the remaining fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

impl PretrainExample {
    /// Full sequence `x ++ y` and the index where loss starts.
    pub fn joined(&self) -> (Vec<usize>, usize) {
        let mut seq = self.x.clone();
        seq.extend(&self.y);
        (seq, self.x.len())
    }
}

pub fn build_pretrain_example(d: &KeywordedText, vocab: &Vocab) -> Result<PretrainExample> {
    if d.len() < 3 {
        return Err(LarrError::Arity {
            expected: 3,
            got: d.len(),
        });
    }
    let all = wrap_keywords(d, 0..=d.len() - 1, vocab)?;
    let head = KeywordedText {
        slices: d.slices[..2].to_vec(),
    };
    let x_len = wrap_slices(&head, vocab)?.len();
    let y = all[x_len..].to_vec();
    let mut x = all;
    x.truncate(x_len);
    Ok(PretrainExample { x, y })
}

/// Deterministic whitespace canonicalization used for cache keys.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// All distinct characters in `texts`, useful when building a vocabulary that
/// must cover every rendered description.
pub fn charset<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeSet<char> {
    texts.into_iter().flat_map(str::chars).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["abcdefghijklmnopqrstuvwxyz (),0123456789PC"], None, SpecialTokenRegistry::standard()).unwrap()
    }

    #[test]
    fn tiny_corpus_vocab() {
        let v = Vocab::build(["ab"], None, SpecialTokenRegistry::standard()).unwrap();
        let reg = v.registry();
        assert_eq!(v.size(), reg.agg_token + 1 + 2);
        let a = v.char_id('a');
        let b = v.char_id('b');
        assert!(a > reg.agg_token && b > reg.agg_token && a != b);
        assert!(Vocab::build([""], None, SpecialTokenRegistry::standard()).is_err());
    }

    #[test]
    fn registry_ids_distinct() {
        let r = SpecialTokenRegistry::standard();
        let ids: BTreeSet<usize> = r.ids().collect();
        assert_eq!(ids.len(), 2 * 8 + 1);
        assert!(!ids.contains(&PAD) && !ids.contains(&UNK));
        assert_eq!(r.poi_pairs.len(), 6);
        assert_eq!(r.user_pairs.len(), 2);
    }

    #[test]
    fn oov_decodes_to_replacement() {
        let v = vocab();
        let ids = v.encode("a!b");
        assert_eq!(ids[1], UNK);
        assert_eq!(v.decode(&ids), format!("a{REPLACEMENT}b"));
    }

    #[test]
    fn wrap_two_slices() {
        let v = vocab();
        let t = KeywordedText::new([(0, "Pizza Palace".into()), (1, "cell (3,7)".into())]);
        let w = wrap_keywords(&t, 0..=1, &v).unwrap();
        let r = v.registry();
        let mut expect = vec![r.bos(0).unwrap()];
        expect.extend(v.encode("Pizza Palace"));
        expect.push(r.eos(0).unwrap());
        expect.push(r.bos(1).unwrap());
        expect.extend(v.encode("cell (3,7)"));
        expect.push(r.eos(1).unwrap());
        assert_eq!(w, expect);
    }

    #[test]
    fn empty_slice_adjacent_markers() {
        let v = vocab();
        let t = KeywordedText::new([(3, String::new())]);
        assert_eq!(wrap_keywords(&t, 3..=3, &v).unwrap(), vec![v.registry().bos(3).unwrap(), v.registry().eos(3).unwrap()]);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let v = vocab();
        let t = KeywordedText::new([(0, "a".into())]);
        assert!(matches!(wrap_keywords(&t, 0..=1, &v), Err(LarrError::Arity { .. })));
    }

    #[test]
    fn pretrain_example_boundaries() {
        let v = vocab();
        let d = KeywordedText::new((0..4).map(|k| (k, format!("s{k}"))));
        let ex = build_pretrain_example(&d, &v).unwrap();
        let r = v.registry();
        assert_eq!(unwrap_keywords(&ex.x, &v).unwrap().slices.iter().map(|s| s.keyword).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(unwrap_keywords(&ex.y, &v).unwrap().slices.iter().map(|s| s.keyword).collect::<Vec<_>>(), [2, 3]);
        let (joined, start) = ex.joined();
        assert_eq!(joined, wrap_keywords(&d, 0..=3, &v).unwrap());
        assert_eq!(start, ex.x.len());
        assert!(!ex.y.contains(&r.bos(0).unwrap()) && !ex.y.contains(&r.bos(1).unwrap()));
        let short = KeywordedText::new((0..2).map(|k| (k, "x".into())));
        assert!(build_pretrain_example(&short, &v).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let v = vocab();
        let m = v.to_manifest();
        assert_eq!(Vocab::from_manifest(&m).unwrap(), v);
        assert!(Vocab::from_manifest(&m.replace("larr-vocab 1", "larr-vocab 9")).is_err());
    }

    #[test]
    fn max_size_keeps_most_frequent() {
        let v = Vocab::build(["aaabbc"], Some(2), SpecialTokenRegistry::standard()).unwrap();
        assert_eq!(v.char_id('c'), UNK);
        assert_ne!(v.char_id('a'), UNK);
    }
}
