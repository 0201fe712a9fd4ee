use std::path::{Path, PathBuf};

use msl_core::ats::{RootBranch, TauBounds};
use msl_core::catalog::{InteractionConfig, TitleShape};
use msl_core::losses::NegativeScale;
use msl_core::model::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_franchises: usize,
    pub items_per_franchise: usize,
    pub title: TitleShape,
    pub interactions: InteractionConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_franchises: 20,
            items_per_franchise: 10,
            title: TitleShape::default(),
            interactions: InteractionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub init_scale: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 32, init_scale: 0.1, optimizer: OptimizerKind::default(), lr: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Lml,
    Msl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TemperatureMode {
    Fixed { tau: f64 },
    Ats { eta: f64, smoothing: f64, bounds: TauBounds, branch: RootBranch },
}

impl Default for TemperatureMode {
    fn default() -> Self {
        TemperatureMode::Fixed { tau: 1.0 }
    }
}

impl TemperatureMode {
    pub fn ats_default() -> Self {
        TemperatureMode::Ats { eta: 0.25, smoothing: 0.1, bounds: TauBounds::default(), branch: RootBranch::default() }
    }
}

/// Everything a run depends on. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub outdir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub temperature: TemperatureMode,
    /// Scale negatives by `|Z| / |Z_valid|` (MSL only).
    pub vocab_ratio_alpha: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub ks: Vec<usize>,
    pub beam_size: usize,
    pub length_normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: "run".into(),
            outdir: PathBuf::from("runs"),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossKind::Lml,
            temperature: TemperatureMode::default(),
            vocab_ratio_alpha: false,
            epochs: 10,
            batch_size: 64,
            ks: vec![5, 10],
            beam_size: 10,
            length_normalize: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("parsing {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive cutoffs".into());
        }
        if !self.ks.contains(&5) {
            return bad("ks must contain 5 (model selection uses NDCG@5)".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id {:?} must be a plain file name", self.run_id));
        }
        if let TemperatureMode::Fixed { tau } = self.temperature {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("temperature {tau} must be positive"));
            }
        }
        if self.vocab_ratio_alpha && self.loss != LossKind::Msl {
            return bad("the vocabulary-ratio alpha applies to the msl loss only".into());
        }
        Ok(())
    }

    pub fn negative_scale(&self) -> NegativeScale {
        if self.vocab_ratio_alpha {
            NegativeScale::VocabRatio
        } else {
            NegativeScale::One
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.outdir.join(&self.run_id)
    }

    /// Seed of a named random stream.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        derive_seed(self.seed, stream.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Catalog,
    Interactions,
    Init,
    Batching,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Catalog => "catalog",
            Stream::Interactions => "interactions",
            Stream::Init => "init",
            Stream::Batching => "batching",
        }
    }
}

/// FNV-1a of the stream name mixed into the root seed with a SplitMix64
/// finalizer.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
