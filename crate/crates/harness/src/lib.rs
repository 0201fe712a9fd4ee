//! Experiment harness: synthetic data, training loop, evaluation, and the
//! diagnostic commands behind the `msl` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod output;
pub mod train;

use msl_core::ats::AtsError;
use msl_core::catalog::CatalogError;
use msl_core::decode::DecodeError;
use msl_core::losses::LossError;
use msl_core::model::ModelError;
use msl_core::trie::TrieError;
use thiserror::Error;

pub use config::{LossKind, RunConfig, TemperatureMode};
pub use data::Dataset;
pub use train::{run, run_on, RunRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; last good checkpoint kept")]
    NumericAbort { step: u64, what: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Ats(#[from] AtsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for numeric aborts, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::NumericAbort { .. } | HarnessError::Model(ModelError::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}
