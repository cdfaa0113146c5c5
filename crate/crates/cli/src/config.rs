//! Run configuration read from TOML.

use std::path::Path;

use dense2moe_core::corpus::CorpusConfig;
use dense2moe_core::dit::DitConfig;
use dense2moe_core::distill::{Stage, StageConfig, LAMBDA_BALANCE, LAMBDA_FEATURE};
use dense2moe_core::flow::DEFAULT_STEPS;
use dense2moe_core::mob::MobGroupSpec;
use dense2moe_core::moe::MoeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DitConfig,
    pub corpus: CorpusConfig,
    pub moe: MoeSection,
    pub mob: MobSection,
    pub stage: Stages,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: DitConfig::default(),
            corpus: CorpusConfig::default(),
            moe: MoeSection::default(),
            mob: MobSection::default(),
            stage: Stages::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSection {
    pub shared_ratio: f64,
    pub normal_ratio: f64,
    pub n_experts: usize,
    pub top_k: usize,
    /// Blocks whose FFNs stay dense.
    pub skip_blocks: Vec<usize>,
    pub calibration_batches: usize,
    pub calibration_batch_size: usize,
}

impl Default for MoeSection {
    fn default() -> Self {
        let m = MoeConfig::default();
        Self {
            shared_ratio: m.shared_ratio,
            normal_ratio: m.normal_ratio,
            n_experts: m.n_experts,
            top_k: m.top_k,
            skip_blocks: Vec::new(),
            calibration_batches: dense2moe_core::taylor::CALIBRATION_BATCHES,
            calibration_batch_size: 4,
        }
    }
}

impl MoeSection {
    pub fn layer(&self) -> MoeConfig {
        MoeConfig {
            shared_ratio: self.shared_ratio,
            normal_ratio: self.normal_ratio,
            n_experts: self.n_experts,
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobSection {
    pub groups: Vec<MobGroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_feature: f64,
    pub lambda_balance: f64,
    /// Write an intermediate checkpoint every this many steps; 0 writes
    /// only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-3,
            batch_size: 4,
            lambda_feature: LAMBDA_FEATURE,
            lambda_balance: LAMBDA_BALANCE,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn stage_config(&self, stage: Stage, seed: u64) -> StageConfig {
        StageConfig {
            stage,
            steps: self.steps,
            lr: self.lr,
            lambda_feature: self.lambda_feature,
            lambda_balance: self.lambda_balance,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub teacher: TrainSection,
    pub init: TrainSection,
    pub moe: TrainSection,
    pub mob: TrainSection,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            teacher: TrainSection { steps: 300, batch_size: 8, ..TrainSection::default() },
            init: TrainSection::default(),
            moe: TrainSection::default(),
            mob: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub sample_steps: usize,
    pub prompts_per_category: usize,
    pub probe_timesteps: Vec<f64>,
    pub topk_values: Vec<usize>,
    pub validation_size: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            sample_steps: DEFAULT_STEPS,
            prompts_per_category: 10,
            probe_timesteps: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            topk_values: vec![0, 1, 2, 4, 12],
            validation_size: 64,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked before a model exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.moe
            .layer()
            .validate(self.model.hidden, self.model.ffn_ratio as f64)?;
        dense2moe_core::corpus::Corpus::new(self.corpus.clone(), &self.model)?;
        let stages = [&self.stage.teacher, &self.stage.init, &self.stage.moe, &self.stage.mob];
        if stages.iter().any(|s| s.batch_size == 0 || !(s.lr > 0.0)) {
            return Err(CliError::Config("stage batch_size and lr must be positive".into()));
        }
        if self.analysis.sample_steps == 0 {
            return Err(CliError::Config("analysis.sample_steps must be positive".into()));
        }
        Ok(())
    }
}
