//! Trie-constrained decoding, item scoring and ranking metrics.
//!
//! An item's score is the sum over its tokens (END included) of the
//! unit-temperature masked log-probability, conditioned on the prompt
//! followed by the item prefix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ItemId, TokenId, END};
use crate::losses::{lml_token, log_sum_exp, msl_token, LossError};
use crate::model::{ModelError, NextTokenScorer};
use crate::trie::{TokenTrie, TrieCursor, TrieError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be at least 1")]
    BeamSize,
    #[error("cutoff K must be at least 1")]
    Cutoff,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// `log softmax(f)` restricted to `valid`, in `valid` order.
fn masked_log_probs(logits: &[f64], valid: &[TokenId]) -> Vec<f64> {
    let lse = log_sum_exp(valid.iter().map(|&z| logits[z as usize]));
    valid.iter().map(|&z| logits[z as usize] - lse).collect()
}

fn context(prompt: &[TokenId], prefix: &[TokenId]) -> Vec<TokenId> {
    let mut c = Vec::with_capacity(prompt.len() + prefix.len());
    c.extend_from_slice(prompt);
    c.extend_from_slice(prefix);
    c
}

/// Logits rows for every position of `seq`, each conditioned on
/// `prompt ++ seq[..t]`.
pub fn response_logits<M: NextTokenScorer + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    seq: &[TokenId],
) -> Result<Vec<Vec<f64>>, DecodeError> {
    (0..seq.len()).map(|t| model.logits(&context(prompt, &seq[..t])).map_err(DecodeError::from)).collect()
}

/// Masked log-probability of a stored item sequence given the prompt.
pub fn score_item<M: NextTokenScorer + ?Sized>(
    model: &M,
    trie: &TokenTrie,
    prompt: &[TokenId],
    seq: &[TokenId],
) -> Result<f64, DecodeError> {
    let mask = trie.masks_for_target(seq)?;
    let mut score = 0.0;
    for (t, &y) in seq.iter().enumerate() {
        let valid = mask.valid(t);
        let logits = model.logits(&context(prompt, &seq[..t]))?;
        let lp = masked_log_probs(&logits, valid);
        let k = valid.binary_search(&y).expect("target token is valid at its own position");
        score += lp[k];
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Vec<TokenId>,
    pub cum_log_prob: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Rank by mean per-token log-probability instead of the sum.
    /// Disables early stopping.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(beam_size: usize) -> Self {
        Self { beam_size, length_normalize: false }
    }
}

/// Items with scores, best first, ties by ascending item id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Sorts `(item, score)` pairs into ranking order and keeps the first `k`.
    pub fn from_scored(mut scored: Vec<(ItemId, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let (items, scores) = scored.into_iter().unzip();
        Self { items, scores }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based rank of `item`.
    pub fn rank_of(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

struct Live<'t> {
    prefix: Vec<TokenId>,
    score: f64,
    cursor: TrieCursor<'t>,
}

fn rank_key(score: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        score / len as f64
    } else {
        score
    }
}

/// Beam search whose expansions are restricted to trie-valid tokens.
///
/// Each step scores every valid expansion of every live beam and keeps the
/// best `beam_size`; those ending in END retire to the result pool. Without
/// length normalization, scores only decrease along a path, so the search
/// stops once no live beam can beat the pool's `beam_size`-th entry.
pub fn constrained_beam_search<M: NextTokenScorer + ?Sized>(
    model: &M,
    trie: &TokenTrie,
    prompt: &[TokenId],
    cfg: &BeamConfig,
) -> Result<RankedList, DecodeError> {
    let width = cfg.beam_size;
    if width == 0 {
        return Err(DecodeError::BeamSize);
    }
    let mut live = vec![Live { prefix: Vec::new(), score: 0.0, cursor: trie.cursor() }];
    let mut pool: Vec<(ItemId, f64)> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<Live> = Vec::new();
        for beam in &live {
            let valid = beam.cursor.valid_next();
            if valid.is_empty() {
                continue;
            }
            let logits = model.logits(&context(prompt, &beam.prefix))?;
            for (&tok, lp) in valid.iter().zip(masked_log_probs(&logits, &valid)) {
                let mut prefix = beam.prefix.clone();
                prefix.push(tok);
                let cursor = beam.cursor.step(tok).expect("valid token has a child");
                cands.push(Live { prefix, score: beam.score + lp, cursor });
            }
        }
        let norm = cfg.length_normalize;
        cands.sort_by(|a, b| {
            rank_key(b.score, b.prefix.len(), norm)
                .total_cmp(&rank_key(a.score, a.prefix.len(), norm))
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.prefix.last() == Some(&END) {
                let item = c.cursor.item().expect("END leaf stores an item");
                pool.push((item, rank_key(c.score, c.prefix.len(), norm)));
            } else {
                live.push(c);
            }
        }
        if !norm && pool.len() >= width && !live.is_empty() {
            let mut scores: Vec<f64> = pool.iter().map(|p| p.1).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let cutoff = scores[width - 1];
            // Equal scores can still win on item id, hence strict.
            if live.iter().all(|l| l.score < cutoff) {
                break;
            }
        }
    }
    Ok(RankedList::from_scored(pool, width))
}

/// Scores every stored item and ranks the whole catalog.
pub fn rank_all_items<M: NextTokenScorer + ?Sized>(
    model: &M,
    trie: &TokenTrie,
    sequences: &[Vec<TokenId>],
    prompt: &[TokenId],
) -> Result<RankedList, DecodeError> {
    let scored = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i as ItemId, score_item(model, trie, prompt, s)?)))
        .collect::<Result<Vec<_>, DecodeError>>()?;
    let n = scored.len();
    Ok(RankedList::from_scored(scored, n))
}

pub fn ndcg_at_k(ranked: &[ItemId], positive: ItemId, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == positive) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

pub fn hr_at_k(ranked: &[ItemId], positive: ItemId, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == positive) {
        1.0
    } else {
        0.0
    }
}

pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user_id: u32,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
}

/// NDCG@K and HR@K per user and macro-averaged, for each K in `ks`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    /// Builds the report from `(user_id, ranking, positive)` rows. Averages
    /// are summed in the given order.
    pub fn from_rankings<'a, I>(ks: &[usize], rows: I) -> Result<Self, DecodeError>
    where
        I: IntoIterator<Item = (u32, &'a RankedList, ItemId)>,
    {
        if ks.contains(&0) {
            return Err(DecodeError::Cutoff);
        }
        let per_user: Vec<UserMetrics> = rows
            .into_iter()
            .map(|(user_id, list, pos)| UserMetrics {
                user_id,
                ndcg: ks.iter().map(|&k| ndcg_at_k(&list.items, pos, k)).collect(),
                hr: ks.iter().map(|&k| hr_at_k(&list.items, pos, k)).collect(),
            })
            .collect();
        let n = per_user.len().max(1) as f64;
        let mean = |f: &dyn Fn(&UserMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..ks.len()).map(|j| per_user.iter().map(|u| f(u)[j]).sum::<f64>() / n).collect()
        };
        let ndcg = mean(&|u| &u.ndcg);
        let hr = mean(&|u| &u.hr);
        Ok(Self { ks: ks.to_vec(), ndcg, hr, per_user })
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.hr[j])
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: u32,
    pub ranked: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn new(user_id: u32, list: &RankedList) -> Self {
        Self { user_id, ranked: list.items.clone(), scores: list.scores.clone() }
    }
}

/// Outcome of the ranking-loss bound check for one (prompt, positive) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    /// Pessimistic rank: items scoring at least as high as the positive.
    pub rank: usize,
    /// `-ln(1 / ln(1 + rank))`.
    pub neg_log_ndcg_ln: f64,
    /// `-ln(1 / log2(1 + rank))`.
    pub neg_log_ndcg_log2: f64,
    /// Sequence-level unit-temperature MSL of the positive.
    pub msl: f64,
    pub lml: f64,
    pub holds_ln: bool,
    pub holds_log2: bool,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.holds_ln && self.holds_log2
    }
}

/// Slack for rounding in the chain comparisons.
pub const BOUND_SLACK: f64 = 1e-12;

/// Checks `-ln NDCG <= MSL <= LML` for the positive item against a full
/// enumeration of the catalog.
pub fn ranking_bound_check<M: NextTokenScorer + ?Sized>(
    model: &M,
    trie: &TokenTrie,
    sequences: &[Vec<TokenId>],
    prompt: &[TokenId],
    positive: ItemId,
) -> Result<BoundCheck, DecodeError> {
    let pos_seq = &sequences[positive as usize];
    let scores = sequences.iter().map(|s| score_item(model, trie, prompt, s)).collect::<Result<Vec<_>, _>>()?;
    let p = scores[positive as usize];
    let rank = scores.iter().filter(|&&s| s >= p).count();

    let rows = response_logits(model, prompt, pos_seq)?;
    let mask = trie.masks_for_target(pos_seq)?;
    let mut msl = 0.0;
    let mut lml = 0.0;
    for (t, (f, &y)) in rows.iter().zip(pos_seq).enumerate() {
        msl += msl_token(f, mask.valid(t), y, 1.0, 1.0)?;
        lml += lml_token(f, y)?;
    }
    let r = rank as f64;
    let neg_log_ndcg_ln = (1.0 + r).ln().ln();
    let neg_log_ndcg_log2 = (1.0 + r).log2().ln();
    let upper_ok = msl <= lml + BOUND_SLACK;
    Ok(BoundCheck {
        rank,
        neg_log_ndcg_ln,
        neg_log_ndcg_log2,
        msl,
        lml,
        holds_ln: neg_log_ndcg_ln <= msl + BOUND_SLACK && upper_ok,
        holds_log2: neg_log_ndcg_log2 <= msl + BOUND_SLACK && upper_ok,
    })
}
