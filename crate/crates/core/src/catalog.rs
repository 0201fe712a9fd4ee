//! Synthetic item catalogs, user interactions and the closed token vocabulary.
//!
//! Every item title is a short list of words; one word is one token. Items of
//! the same franchise share their leading token, so the prefix trie built over
//! the catalog branches at the franchise level first and then within each
//! franchise.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;
pub type ItemId = u32;

pub const PAD: TokenId = 0;
pub const SEP: TokenId = 1;
pub const ASK: TokenId = 2;
pub const END: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sep>", "<ask>", "<end>"];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid catalog configuration: {0}")]
    Config(String),
    #[error("could not find a unique title for item {item} after {attempts} attempts")]
    TitleSpaceExhausted { item: ItemId, attempts: usize },
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("catalog integrity: {0}")]
    Integrity(String),
    #[error("malformed record on line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed vocabulary with four reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from ordinary words; the reserved tokens are
    /// prepended. Duplicate words are rejected.
    pub fn new<I, S>(words: I) -> Result<Self, CatalogError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from the full ordered token list, reserved tokens
    /// included. Used when loading a vocab file.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CatalogError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CatalogError::Integrity("vocabulary must start with <pad>, <sep>, <ask>, <end>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(CatalogError::Integrity(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CatalogError> {
        for (id, token) in self.tokens.iter().enumerate() {
            let rec = VocabRecord { id: id as TokenId, token: token.clone() };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CatalogError> {
        let recs: Vec<VocabRecord> = read_records(r)?;
        let mut tokens = Vec::with_capacity(recs.len());
        for (expected, rec) in recs.into_iter().enumerate() {
            if rec.id as usize != expected {
                return Err(CatalogError::Integrity(format!(
                    "vocab ids must be dense and ordered, got {} at position {expected}",
                    rec.id
                )));
            }
            tokens.push(rec.token);
        }
        Self::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabRecord {
    id: TokenId,
    token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: Vec<String>,
}

/// Items plus their END-terminated token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    items: Vec<Item>,
    vocab: Vocab,
    sequences: Vec<Vec<TokenId>>,
    franchise: Vec<u32>,
    n_franchises: usize,
}

impl ItemCatalog {
    /// Validates items against the vocabulary and derives token sequences.
    ///
    /// Franchises are recovered from the leading title token, in order of
    /// first appearance.
    pub fn new(items: Vec<Item>, vocab: Vocab) -> Result<Self, CatalogError> {
        let mut sequences = Vec::with_capacity(items.len());
        let mut seen = HashMap::new();
        let mut heads: HashMap<TokenId, u32> = HashMap::new();
        let mut franchise = Vec::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.item_id as usize != pos {
                return Err(CatalogError::Integrity(format!(
                    "item ids must be dense, found {} at position {pos}",
                    item.item_id
                )));
            }
            if item.title.is_empty() {
                return Err(CatalogError::Integrity(format!("item {pos} has an empty title")));
            }
            let mut seq = Vec::with_capacity(item.title.len() + 1);
            for word in &item.title {
                let id = vocab.id(word).ok_or_else(|| CatalogError::UnknownToken(word.clone()))?;
                if Vocab::is_reserved(id) {
                    return Err(CatalogError::Integrity(format!("reserved token {word:?} inside title of item {pos}")));
                }
                seq.push(id);
            }
            seq.push(END);
            if let Some(other) = seen.insert(seq.clone(), pos) {
                return Err(CatalogError::Integrity(format!(
                    "items {other} and {pos} share the title {:?}",
                    item.title
                )));
            }
            let next = heads.len() as u32;
            franchise.push(*heads.entry(seq[0]).or_insert(next));
            sequences.push(seq);
        }
        Ok(Self { items, vocab, sequences, franchise, n_franchises: heads.len() })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// END-terminated token sequence of an item.
    pub fn sequence(&self, item: ItemId) -> Result<&[TokenId], CatalogError> {
        self.sequences.get(item as usize).map(Vec::as_slice).ok_or(CatalogError::UnknownItem(item))
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn franchise_of(&self, item: ItemId) -> u32 {
        self.franchise[item as usize]
    }

    pub fn n_franchises(&self) -> usize {
        self.n_franchises
    }

    /// Items grouped by franchise, each group in ascending item id.
    pub fn franchise_members(&self) -> Vec<Vec<ItemId>> {
        let mut groups = vec![Vec::new(); self.n_franchises];
        for (id, &f) in self.franchise.iter().enumerate() {
            groups[f as usize].push(id as ItemId);
        }
        groups
    }

    /// Mean title length in tokens, END included.
    pub fn mean_sequence_len(&self) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        let total: usize = self.sequences.iter().map(Vec::len).sum();
        total as f64 / self.sequences.len() as f64
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CatalogError> {
        for item in &self.items {
            serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, vocab: Vocab) -> Result<Self, CatalogError> {
        let items: Vec<Item> = read_records(r)?;
        Self::new(items, vocab)
    }
}

/// Shape of generated titles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TitleShape {
    /// Title length in words, END excluded.
    pub min_len: usize,
    pub max_len: usize,
    /// Sub-series words available to each franchise for its second token.
    pub series_per_franchise: usize,
    /// Global pool of sub-series words.
    pub series_pool: usize,
    /// Global pool of descriptor words used from the third token on.
    pub descriptor_pool: usize,
    /// Vocabulary words that never occur in any title.
    pub unused_words: usize,
    /// Fresh draws tried before falling back to collision suffixes.
    pub max_attempts: usize,
}

impl Default for TitleShape {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 6,
            series_per_franchise: 3,
            series_pool: 12,
            descriptor_pool: 40,
            unused_words: 0,
            max_attempts: 64,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "br", "c", "d", "dr", "f", "g", "gl", "h", "j", "k", "kr", "l", "m", "n", "p", "pl", "qu", "r", "s", "sk",
    "st", "t", "tr", "v", "w", "z",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "y"];
const CODAS: &[&str] = &["", "n", "r", "x", "s", "k", "m", "l"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push_str(ONSETS.choose(rng).unwrap());
            word.push_str(NUCLEI.choose(rng).unwrap());
        }
        word.push_str(CODAS.choose(rng).unwrap());
        if taken.insert(word.clone()) {
            return word;
        }
    }
}

/// Generates `n_franchises * items_per_franchise` items.
///
/// The first title word is the franchise name and is unique per franchise;
/// the second is one of the franchise's sub-series words; the rest are
/// descriptors. Output depends only on the arguments.
pub fn gen_catalog(
    seed: u64,
    n_franchises: usize,
    items_per_franchise: usize,
    shape: &TitleShape,
) -> Result<ItemCatalog, CatalogError> {
    if n_franchises == 0 || items_per_franchise == 0 {
        return Err(CatalogError::Config("n_franchises and items_per_franchise must be at least 1".into()));
    }
    if shape.min_len == 0 || shape.min_len > shape.max_len {
        return Err(CatalogError::Config(format!(
            "title length range [{}, {}] is empty or starts at 0",
            shape.min_len, shape.max_len
        )));
    }
    if shape.max_len >= 2 && (shape.series_pool == 0 || shape.series_per_franchise == 0) {
        return Err(CatalogError::Config("titles longer than one word need series words".into()));
    }
    if shape.max_len >= 3 && shape.descriptor_pool == 0 {
        return Err(CatalogError::Config("titles longer than two words need descriptors".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let heads: Vec<String> = (0..n_franchises).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let series: Vec<String> = (0..shape.series_pool).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let descriptors: Vec<String> = (0..shape.descriptor_pool).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let unused: Vec<String> = (0..shape.unused_words).map(|_| pseudo_word(&mut rng, &mut taken)).collect();

    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut items = Vec::with_capacity(n_franchises * items_per_franchise);
    let mut suffixes: Vec<String> = Vec::new();
    for head in &heads {
        let k = shape.series_per_franchise.min(series.len());
        let own_series: Vec<&String> = series.choose_multiple(&mut rng, k).collect();
        for _ in 0..items_per_franchise {
            let item_id = items.len() as ItemId;
            let mut title = None;
            for _ in 0..shape.max_attempts.max(1) {
                let len = rng.random_range(shape.min_len..=shape.max_len);
                let mut t = vec![head.clone()];
                if len >= 2 {
                    t.push((*own_series.choose(&mut rng).unwrap()).clone());
                }
                while t.len() < len {
                    t.push(descriptors.choose(&mut rng).unwrap().clone());
                }
                if !seen.contains(&t) {
                    title = Some(t);
                    break;
                }
            }
            let title = match title {
                Some(t) => t,
                None => {
                    // Collision suffixes ("mk2", "mk3", ...) appended to the
                    // shortest form of the title.
                    let base = vec![head.clone()];
                    let mut found = None;
                    for n in 2..(2 + shape.max_attempts.max(1) * 8) {
                        let suffix = format!("mk{n}");
                        let mut t = base.clone();
                        t.push(suffix.clone());
                        if !seen.contains(&t) {
                            if !suffixes.contains(&suffix) {
                                suffixes.push(suffix);
                            }
                            found = Some(t);
                            break;
                        }
                    }
                    found.ok_or(CatalogError::TitleSpaceExhausted { item: item_id, attempts: shape.max_attempts })?
                }
            };
            seen.insert(title.clone());
            items.push(Item { item_id, title });
        }
    }

    let vocab = Vocab::new(heads.into_iter().chain(series).chain(descriptors).chain(suffixes).chain(unused))?;
    ItemCatalog::new(items, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u32,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    pub records: Vec<Interaction>,
}

impl InteractionSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CatalogError> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, catalog: &ItemCatalog) -> Result<Self, CatalogError> {
        let records: Vec<Interaction> = read_records(r)?;
        for rec in &records {
            for &id in rec.history.iter().chain(std::iter::once(&rec.target)) {
                if id as usize >= catalog.len() {
                    return Err(CatalogError::UnknownItem(id));
                }
            }
            if rec.history.is_empty() || rec.history.contains(&rec.target) {
                return Err(CatalogError::Integrity(format!(
                    "user {}: history must be non-empty and exclude the target",
                    rec.user_id
                )));
            }
        }
        Ok(Self { records })
    }
}

/// Parameters of [`gen_interactions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    pub n_users: usize,
    pub history_min: usize,
    pub history_max: usize,
    /// Probability that a drawn item comes from the user's preferred franchise.
    pub affinity: f64,
    /// Zipf exponent of item popularity inside a franchise; 0 is uniform.
    pub popularity_exponent: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self { n_users: 2000, history_min: 3, history_max: 8, affinity: 0.8, popularity_exponent: 1.0 }
    }
}

const MAX_REJECTIONS: usize = 64;

/// One record per user; the first 80% of users go to train, the next 10% to
/// valid and the rest to test.
pub fn gen_interactions(
    seed: u64,
    catalog: &ItemCatalog,
    cfg: &InteractionConfig,
) -> Result<InteractionSet, CatalogError> {
    if !(0.0..=1.0).contains(&cfg.affinity) {
        return Err(CatalogError::Config(format!("affinity {} outside [0, 1]", cfg.affinity)));
    }
    if catalog.len() < 2 {
        return Err(CatalogError::Config("need at least two items so the target can differ from the history".into()));
    }
    if cfg.history_min == 0 || cfg.history_min > cfg.history_max {
        return Err(CatalogError::Config(format!(
            "history length range [{}, {}] is invalid",
            cfg.history_min, cfg.history_max
        )));
    }

    let members = catalog.franchise_members();
    let weights: Vec<Vec<f64>> = members
        .iter()
        .map(|group| (0..group.len()).map(|rank| 1.0 / ((rank + 1) as f64).powf(cfg.popularity_exponent)).collect())
        .collect();
    let n_items = catalog.len() as ItemId;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, fav: usize| -> ItemId {
        if rng.random_bool(cfg.affinity) {
            let w = &weights[fav];
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return members[fav][i];
                }
                u -= wi;
            }
            *members[fav].last().unwrap()
        } else {
            rng.random_range(0..n_items)
        }
    };

    let n_train = cfg.n_users * 8 / 10;
    let n_valid = cfg.n_users / 10;
    let mut records = Vec::with_capacity(cfg.n_users);
    for user in 0..cfg.n_users {
        let fav = rng.random_range(0..members.len());
        let target = draw(&mut rng, fav);
        let len = rng.random_range(cfg.history_min..=cfg.history_max);
        let mut history = Vec::with_capacity(len);
        while history.len() < len {
            let mut pick = None;
            for _ in 0..MAX_REJECTIONS {
                let v = draw(&mut rng, fav);
                if v != target {
                    pick = Some(v);
                    break;
                }
            }
            let v = pick.unwrap_or_else(|| {
                let v = rng.random_range(0..n_items - 1);
                if v >= target {
                    v + 1
                } else {
                    v
                }
            });
            history.push(v);
        }
        let split = if user < n_train {
            Split::Train
        } else if user < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        records.push(Interaction { user_id: user as u32, history, target, split });
    }
    Ok(InteractionSet { records })
}

/// Prompt tokens: item titles separated by SEP, closed by ASK.
pub fn build_prompt(history: &[ItemId], catalog: &ItemCatalog) -> Result<Vec<TokenId>, CatalogError> {
    if history.is_empty() {
        return Err(CatalogError::Config("prompt needs a non-empty history".into()));
    }
    let mut out = Vec::new();
    for (i, &item) in history.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        let seq = catalog.sequence(item)?;
        out.extend_from_slice(&seq[..seq.len() - 1]);
    }
    out.push(ASK);
    Ok(out)
}

/// Inverse of [`build_prompt`].
pub fn parse_prompt(prompt: &[TokenId], catalog: &ItemCatalog) -> Result<Vec<ItemId>, CatalogError> {
    let body = match prompt.split_last() {
        Some((&ASK, body)) => body,
        _ => return Err(CatalogError::Integrity("prompt must end with ASK".into())),
    };
    let lookup: HashMap<&[TokenId], ItemId> =
        catalog.sequences().iter().enumerate().map(|(i, s)| (&s[..s.len() - 1], i as ItemId)).collect();
    body.split(|&t| t == SEP)
        .map(|title| {
            lookup
                .get(title)
                .copied()
                .ok_or_else(|| CatalogError::Integrity(format!("prompt segment {title:?} is not a catalog title")))
        })
        .collect()
}

fn read_records<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>, CatalogError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CatalogError::Parse { line: n + 1, source })?);
    }
    Ok(out)
}
