//! Masked softmax training for generative item retrieval.
//!
//! Items are token sequences stored in a prefix trie. At each response
//! position only trie-valid tokens can lead to a real item, and the masked
//! softmax loss normalizes over exactly those tokens.

pub mod ats;
pub mod catalog;
pub mod decode;
pub mod losses;
pub mod model;
pub mod trie;

pub use catalog::{ItemCatalog, ItemId, TokenId, Vocab};
pub use model::{ModelParams, NextTokenScorer};
pub use trie::{TokenTrie, ValidMask};
