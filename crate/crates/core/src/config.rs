//! Run configuration: one serializable struct fully describes a
//! training run and is embedded in every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, Stage};
use crate::projector::ProjectorVariant;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid JSON: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("data fraction {0} is not one of 0.01, 0.10, 1.00")]
    BadFraction(f64),
    #[error("missing data manifest {0}")]
    MissingManifest(PathBuf),
    #[error("checkpoint stage {found} where {expected} was required")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("CGVLM_SEED value {0:?} is not an integer")]
    BadSeedOverride(String),
}

/// Which alignment objective a stage-1 run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Contrastive + generative at the configured alpha.
    Cg,
    /// Generative only.
    Gen,
    /// Contrastive only.
    Con,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Cg => write!(f, "cg"),
            Objective::Gen => write!(f, "gen"),
            Objective::Con => write!(f, "con"),
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}

fn default_batch() -> usize {
    32
}

fn default_warmup() -> f64 {
    0.03
}

fn default_epochs() -> usize {
    1
}

fn default_clip() -> f64 {
    1.0
}

fn default_fraction() -> f64 {
    1.0
}

fn default_objective() -> Objective {
    Objective::Cg
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub symmetric_contrastive: bool,
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Optional hard cap on optimizer steps; the schedule's horizon
    /// becomes this cap when set. Used by the ablation harness to give
    /// every data fraction the same optimization budget.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
}

pub const ALIGN_LR_DEFAULT: f64 = 1e-3;
pub const TUNE_LR_DEFAULT: f64 = 2e-5;

impl TrainConfig {
    pub fn align_defaults(data_dir: PathBuf, out_dir: PathBuf, seed: u64) -> Self {
        Self {
            stage: Stage::Align,
            alpha: 1.0,
            objective: Objective::Cg,
            symmetric_contrastive: false,
            data_fraction: 1.0,
            seed,
            batch_size: default_batch(),
            learning_rate: ALIGN_LR_DEFAULT,
            warmup_ratio: default_warmup(),
            epochs: 1,
            max_steps: None,
            grad_clip: default_clip(),
            data_dir,
            out_dir,
            model: ModelConfig::default(),
        }
    }

    pub fn tune_defaults(data_dir: PathBuf, out_dir: PathBuf, seed: u64) -> Self {
        Self {
            stage: Stage::Tune,
            learning_rate: TUNE_LR_DEFAULT,
            ..Self::align_defaults(data_dir, out_dir, seed)
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config: TrainConfig = serde_json::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        config.apply_env_seed_override()?;
        Ok(config)
    }

    /// CGVLM_SEED, when set, wins over the config's seed.
    pub fn apply_env_seed_override(&mut self) -> Result<(), ConfigError> {
        if let Ok(raw) = std::env::var("CGVLM_SEED") {
            let seed = raw.trim().parse::<u64>().map_err(|_| ConfigError::BadSeedOverride(raw))?;
            self.seed = seed;
        }
        Ok(())
    }

    /// The instruction manifest for this config's data fraction.
    pub fn instruct_manifest(&self) -> Result<PathBuf, ConfigError> {
        let name = if (self.data_fraction - 1.0).abs() < 1e-9 {
            "instruct_100.jsonl"
        } else if (self.data_fraction - 0.10).abs() < 1e-9 {
            "instruct_010.jsonl"
        } else if (self.data_fraction - 0.01).abs() < 1e-9 {
            "instruct_001.jsonl"
        } else {
            return Err(ConfigError::BadFraction(self.data_fraction));
        };
        Ok(self.data_dir.join(name))
    }

    pub fn projector(&self) -> ProjectorVariant {
        self.model.projector
    }
}
