//! Prefix tree over END-terminated item sequences.
//!
//! Nodes live in an arena; each node keeps its children sorted by token id so
//! that `valid_next` answers come out in ascending order without sorting.

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{ItemCatalog, ItemId, TokenId, END};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("sequence {0} is empty")]
    EmptySequence(usize),
    #[error("sequence {0} is not END-terminated or has END before its last position")]
    BadTermination(usize),
    #[error("catalog integrity: sequence {dup} repeats sequence {first}")]
    Duplicate { first: ItemId, dup: ItemId },
    #[error("target {0:?} is not a stored sequence")]
    UnknownTarget(Vec<TokenId>),
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: Vec<(TokenId, u32)>,
    /// Set on END leaves.
    item: Option<ItemId>,
}

impl Node {
    fn child(&self, token: TokenId) -> Option<u32> {
        self.children.binary_search_by_key(&token, |&(t, _)| t).ok().map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct TokenTrie {
    nodes: Vec<Node>,
    item_count: usize,
    stored_tokens: usize,
}

impl TokenTrie {
    /// Inserts every sequence; the index of a sequence becomes its item id.
    pub fn build<'a, I>(sequences: I) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut trie = Self { nodes: vec![Node::default()], item_count: 0, stored_tokens: 0 };
        for (idx, seq) in sequences.into_iter().enumerate() {
            trie.insert(idx, seq)?;
        }
        Ok(trie)
    }

    pub fn from_catalog(catalog: &ItemCatalog) -> Result<Self, TrieError> {
        Self::build(catalog.sequences().iter().map(Vec::as_slice))
    }

    fn insert(&mut self, idx: usize, seq: &[TokenId]) -> Result<(), TrieError> {
        let Some((&last, body)) = seq.split_last() else {
            return Err(TrieError::EmptySequence(idx));
        };
        if last != END || body.contains(&END) {
            return Err(TrieError::BadTermination(idx));
        }
        let mut cur = 0u32;
        for &tok in seq {
            let node = &self.nodes[cur as usize];
            cur = match node.children.binary_search_by_key(&tok, |&(t, _)| t) {
                Ok(i) => node.children[i].1,
                Err(i) => {
                    let id = self.nodes.len() as u32;
                    self.nodes[cur as usize].children.insert(i, (tok, id));
                    self.nodes.push(Node::default());
                    id
                }
            };
        }
        let leaf = &mut self.nodes[cur as usize];
        if let Some(first) = leaf.item {
            return Err(TrieError::Duplicate { first, dup: idx as ItemId });
        }
        leaf.item = Some(idx as ItemId);
        self.item_count += 1;
        self.stored_tokens += seq.len();
        Ok(())
    }

    /// Node count, root included.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Total tokens over all inserted sequences, END included.
    pub fn stored_tokens(&self) -> usize {
        self.stored_tokens
    }

    fn walk(&self, prefix: &[TokenId]) -> Option<u32> {
        let mut cur = 0u32;
        for &tok in prefix {
            cur = self.nodes[cur as usize].child(tok)?;
        }
        Some(cur)
    }

    /// Tokens that extend `prefix` to a prefix of some stored sequence, in
    /// ascending id order. Empty when `prefix` is not a proper prefix.
    pub fn valid_next(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        self.valid_next_slice(prefix).map(|c| c.iter().map(|&(t, _)| t).collect()).unwrap_or_default()
    }

    fn valid_next_slice(&self, prefix: &[TokenId]) -> Option<&[(TokenId, u32)]> {
        self.walk(prefix).map(|n| self.nodes[n as usize].children.as_slice())
    }

    /// Item whose full terminated sequence is `seq`.
    pub fn item_for(&self, seq: &[TokenId]) -> Option<ItemId> {
        self.walk(seq).and_then(|n| self.nodes[n as usize].item)
    }

    /// A cursor at the root for incremental descent.
    pub fn cursor(&self) -> TrieCursor<'_> {
        TrieCursor { trie: self, node: 0 }
    }

    /// Per-position valid sets for a stored target sequence.
    pub fn masks_for_target(&self, target: &[TokenId]) -> Result<ValidMask, TrieError> {
        if self.item_for(target).is_none() {
            return Err(TrieError::UnknownTarget(target.to_vec()));
        }
        let mut positions = Vec::with_capacity(target.len());
        let mut cur = self.cursor();
        for &tok in target {
            positions.push(cur.valid_next());
            cur = cur.step(tok).expect("target was verified to be stored");
        }
        Ok(ValidMask { positions })
    }

    /// Debug dump of all edges in depth-first order.
    pub fn dump_edges(&self) -> Vec<TrieEdge> {
        let mut out = Vec::with_capacity(self.nodes.len().saturating_sub(1));
        let mut stack = vec![(0u32, FNV_OFFSET)];
        while let Some((node, path_hash)) = stack.pop() {
            for &(tok, child) in self.nodes[node as usize].children.iter().rev() {
                out.push(TrieEdge {
                    parent_path_hash: format!("{path_hash:016x}"),
                    token: tok,
                    child_is_terminal: self.nodes[child as usize].item.is_some(),
                });
                stack.push((child, fnv_step(path_hash, tok)));
            }
        }
        out
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv_step(mut h: u64, tok: TokenId) -> u64 {
    for b in tok.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Edge record of the debug dump. Not a stable format.
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct TrieEdge {
    pub parent_path_hash: String,
    pub token: TokenId,
    pub child_is_terminal: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrieCursor<'a> {
    trie: &'a TokenTrie,
    node: u32,
}

impl<'a> TrieCursor<'a> {
    pub fn step(self, token: TokenId) -> Option<Self> {
        self.trie.nodes[self.node as usize].child(token).map(|node| Self { trie: self.trie, node })
    }

    pub fn valid_next(&self) -> Vec<TokenId> {
        self.trie.nodes[self.node as usize].children.iter().map(|&(t, _)| t).collect()
    }

    /// Item stored at this node, if it is an END leaf.
    pub fn item(&self) -> Option<ItemId> {
        self.trie.nodes[self.node as usize].item
    }
}

/// Valid-token sets for each response position of one target.
///
/// The index-list form is canonical; [`ValidMask::dense`] materializes the
/// boolean rows when a full-vocabulary view is needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    positions: Vec<Vec<TokenId>>,
}

impl ValidMask {
    /// A mask that admits the whole vocabulary at every position.
    pub fn full(vocab_size: usize, len: usize) -> Self {
        let all: Vec<TokenId> = (0..vocab_size as TokenId).collect();
        Self { positions: vec![all; len] }
    }

    pub fn from_positions(positions: Vec<Vec<TokenId>>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn valid(&self, t: usize) -> &[TokenId] {
        &self.positions[t]
    }

    pub fn valid_count(&self, t: usize) -> usize {
        self.positions[t].len()
    }

    pub fn positions(&self) -> &[Vec<TokenId>] {
        &self.positions
    }

    pub fn dense(&self, vocab_size: usize) -> Vec<Vec<bool>> {
        self.positions
            .iter()
            .map(|p| {
                let mut row = vec![false; vocab_size];
                for &t in p {
                    row[t as usize] = true;
                }
                row
            })
            .collect()
    }
}

/// Average valid-token count per token instance over a set of targets.
pub fn average_valid_tokens<'a, I>(trie: &TokenTrie, targets: I) -> Result<f64, TrieError>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut total = 0usize;
    let mut count = 0usize;
    for target in targets {
        let mask = trie.masks_for_target(target)?;
        total += mask.positions.iter().map(Vec::len).sum::<usize>();
        count += mask.len();
    }
    Ok(if count == 0 { 0.0 } else { total as f64 / count as f64 })
}
