//! Serde config types consumed by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{MaskingMixture, ModelConfig};
use crate::engine::EngineConfig;
use crate::streamgen::GenConfig;
use crate::{Error, Result};

pub fn load_json_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Ar,
}

fn default_true() -> bool {
    true
}

fn default_clip() -> f64 {
    1.0
}

fn default_margin() -> usize {
    2
}

fn default_p_max() -> f64 {
    50.0
}

fn default_iou() -> f64 {
    0.5
}

fn default_mixture() -> MaskingMixture {
    MaskingMixture::Mixture
}

fn default_taus() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 0.85, 1.0]
}

fn default_ks() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}

/// `train` subcommand config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCliConfig {
    /// JSONL corpora to merge into one training pool.
    pub corpus: Vec<PathBuf>,
    pub kind: ModelKind,
    pub model: ModelConfig,
    #[serde(default = "default_mixture")]
    pub masking: MaskingMixture,
    #[serde(default = "default_true")]
    pub duplication: bool,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Cap on sampled training-window length.
    pub window_max: u64,
    #[serde(default = "default_margin")]
    pub margin: usize,
    /// Label-fraction bound for the AR baseline.
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model_seed: u64,
}

/// Model source for `stream-eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModelCfg {
    Oracle {
        epsilon: f64,
        #[serde(default)]
        boundary_blur: usize,
    },
    Checkpoint {
        path: PathBuf,
    },
    ArCheckpoint {
        path: PathBuf,
    },
}

/// `stream-eval` subcommand config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCliConfig {
    /// JSONL corpora; the file stem names each task.
    pub corpus: Vec<PathBuf>,
    pub model: EvalModelCfg,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

/// `ablate` subcommand config: self-contained corpus generation plus the
/// matched training/engine configuration shared by every arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateCliConfig {
    pub gen_train: GenConfig,
    pub gen_eval: GenConfig,
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub window_max: u64,
    #[serde(default = "default_margin")]
    pub margin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}
