//! Run configuration: one JSON file drives every stage; CLI flags
//! override individual fields; every random stream derives from the
//! single mandatory seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ueidg_core::aeg::{AegConfig, LlmClientConfig};
use ueidg_core::corpus::synth::SynthConfig;
use ueidg_core::corpus::tokenize::Vocab;
use ueidg_core::error::{CoreError, Result};
use ueidg_core::generator::{EvidenceSource, GeneratorConfig, GeneratorTrainConfig};
use ueidg_core::indicator::{IndicatorConfig, IndicatorTrainConfig};
use ueidg_core::retrieval::mining::MiningConfig;
use ueidg_core::retrieval::train::RetrieverTrainConfig;
use ueidg_nn::ModelConfig;

/// Desk-scale model template; `vocab_size: 0` means "use the corpus
/// vocabulary size" (resolved via [`resolve_vocab_size`]).
fn small_model(max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 0,
        d_model: 32,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: 64,
        max_seq_len,
        dropout: 0.0,
        seed: 0,
    }
}

/// Fill in `vocab_size` from the corpus vocabulary when the config left
/// it at 0 (or below the actual vocabulary size).
pub fn resolve_vocab_size(mut model: ModelConfig, vocab: &Vocab) -> ModelConfig {
    if model.vocab_size < vocab.len() {
        model.vocab_size = vocab.len();
    }
    model
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalParams {
    /// Passages fed to the indicator and generator per turn.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_retrieval_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub train: RetrieverTrainConfig,
}

fn default_k() -> usize {
    5
}
fn default_k1() -> f64 {
    1.2
}
fn default_b() -> f64 {
    0.75
}
fn default_retrieval_model() -> ModelConfig {
    small_model(160)
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: default_k(),
            k1: default_k1(),
            b: default_b(),
            model: default_retrieval_model(),
            mining: MiningConfig::default(),
            train: RetrieverTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AegParams {
    #[serde(default)]
    pub client: LlmClientConfig,
    #[serde(default)]
    pub run: AegConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndicatorParams {
    #[serde(default = "default_indicator_config")]
    pub config: IndicatorConfig,
    #[serde(default)]
    pub train: IndicatorTrainConfig,
}

fn default_indicator_config() -> IndicatorConfig {
    IndicatorConfig {
        model: small_model(192),
        ..IndicatorConfig::default()
    }
}

impl Default for IndicatorParams {
    fn default() -> Self {
        IndicatorParams {
            config: default_indicator_config(),
            train: IndicatorTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorParams {
    #[serde(default = "default_generator_config")]
    pub config: GeneratorConfig,
    #[serde(default)]
    pub train: GeneratorTrainConfig,
    #[serde(default = "default_evidence_source")]
    pub evidence_source: EvidenceSource,
}

fn default_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        model: small_model(192),
        ..GeneratorConfig::default()
    }
}

fn default_evidence_source() -> EvidenceSource {
    EvidenceSource::Predicted
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            config: default_generator_config(),
            train: GeneratorTrainConfig::default(),
            evidence_source: default_evidence_source(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; every stage-level seed is derived from it.
    pub seed: u64,
    /// Directory holding every artifact the stages read and write.
    pub out_dir: PathBuf,
    #[serde(default = "default_context_window")]
    pub context_window: usize,
    /// Dialogues held out for generation and evaluation.
    #[serde(default = "default_n_dev")]
    pub n_dev_dialogues: usize,
    /// Label file override; defaults to `<out_dir>/labels.jsonl`.
    #[serde(default)]
    pub labels_file: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub aeg: AegParams,
    #[serde(default)]
    pub indicator: IndicatorParams,
    #[serde(default)]
    pub generator: GeneratorParams,
}

fn default_context_window() -> usize {
    6
}
fn default_n_dev() -> usize {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::InvalidInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CoreError::InvalidInput(format!("config {}: {e}", path.display()))
        })?;
        Ok(cfg)
    }

    /// Overwrite all stage seeds with streams derived from the master
    /// seed, so one number controls the whole run.
    pub fn with_derived_seeds(mut self) -> RunConfig {
        let s = self.seed;
        self.synth.seed = s;
        self.retrieval.model.seed = s ^ 0xA1;
        self.retrieval.mining.seed = s ^ 0xA2;
        self.aeg.run.seed = s ^ 0xA3;
        self.indicator.config.model.seed = s ^ 0xA4;
        self.indicator.train.seed = s ^ 0xA5;
        self.generator.config.model.seed = s ^ 0xA6;
        self.generator.train.seed = s ^ 0xA7;
        self
    }

    /// Seed for the train/dev dialogue split.
    pub fn split_seed(&self) -> u64 {
        self.seed ^ 0xA8
    }
}
