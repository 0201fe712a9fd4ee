use std::time::Instant;

use msl_core::catalog::{build_prompt, gen_catalog, gen_interactions, InteractionSet, ItemCatalog, Split};
use msl_core::trie::{average_valid_tokens, TokenTrie, ValidMask};
use msl_core::{ItemId, TokenId};

use crate::config::{RunConfig, Stream};
use crate::HarnessError;

/// One user's next-item example with its prompt and per-position masks.
#[derive(Debug, Clone)]
pub struct Example {
    pub user_id: u32,
    pub prompt: Vec<TokenId>,
    pub target: ItemId,
    pub response: Vec<TokenId>,
    pub mask: ValidMask,
}

#[derive(Debug)]
pub struct Dataset {
    pub catalog: ItemCatalog,
    pub interactions: InteractionSet,
    pub trie: TokenTrie,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Average valid-token count over training response positions.
    pub train_avt: f64,
    pub trie_build_secs: f64,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self, HarnessError> {
        let catalog = gen_catalog(
            cfg.stream_seed(Stream::Catalog),
            cfg.data.n_franchises,
            cfg.data.items_per_franchise,
            &cfg.data.title,
        )?;
        let interactions = gen_interactions(cfg.stream_seed(Stream::Interactions), &catalog, &cfg.data.interactions)?;
        Self::assemble(catalog, interactions)
    }

    pub fn assemble(catalog: ItemCatalog, interactions: InteractionSet) -> Result<Self, HarnessError> {
        let start = Instant::now();
        let trie = TokenTrie::from_catalog(&catalog)?;
        let trie_build_secs = start.elapsed().as_secs_f64();
        let examples = |split: Split| -> Result<Vec<Example>, HarnessError> {
            interactions
                .split(split)
                .map(|r| {
                    let response = catalog.sequence(r.target)?.to_vec();
                    Ok(Example {
                        user_id: r.user_id,
                        prompt: build_prompt(&r.history, &catalog)?,
                        target: r.target,
                        mask: trie.masks_for_target(&response)?,
                        response,
                    })
                })
                .collect()
        };
        let train = examples(Split::Train)?;
        let valid = examples(Split::Valid)?;
        let test = examples(Split::Test)?;
        if train.is_empty() {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        let train_avt = average_valid_tokens(&trie, train.iter().map(|e| e.response.as_slice()))?;
        Ok(Self { catalog, interactions, trie, train, valid, test, train_avt, trie_build_secs })
    }

    pub fn vocab_size(&self) -> usize {
        self.catalog.vocab().len()
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}
