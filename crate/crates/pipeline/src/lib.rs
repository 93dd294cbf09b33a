//! Command orchestration shared by the service and the CLI: configuration,
//! the eight pipeline commands and the artifact manifest.

pub mod api;
mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use intake_core::training::StepRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use commands::{run, CHECKPOINT_FILE, SYNTHETIC_DIR};
pub use config::{
    apply_override, DataConfig, EncoderConfig, EvalConfig, HeatmapConfig, PipelineConfig, PlotsConfig, VlmConfig,
};
pub use manifest::{sha256_file, Artifact, ArtifactManifest, MANIFEST_FILE};

/// Name of the effective configuration echoed into the output directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("provider failure: {0}")]
    Provider(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Training(_) => 4,
            PipelineError::Provider(_) => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SynthGen,
    TrainStage1,
    TrainStage2,
    Eval,
    EvalDiff,
    Heatmap,
    Plots,
    VlmBench,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::SynthGen,
        Command::TrainStage1,
        Command::TrainStage2,
        Command::Eval,
        Command::EvalDiff,
        Command::Heatmap,
        Command::Plots,
        Command::VlmBench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::TrainStage1 => "train-stage1",
            Command::TrainStage2 => "train-stage2",
            Command::Eval => "eval",
            Command::EvalDiff => "eval-diff",
            Command::Heatmap => "heatmap",
            Command::Plots => "plots",
            Command::VlmBench => "vlm-bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown command `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub command: Command,
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
}

/// Progress and cancellation side channels.
#[derive(Default, Clone)]
pub struct RunHooks {
    pub on_step: Option<Arc<dyn Fn(&StepRecord) + Send + Sync>>,
    pub cancel: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub command: Command,
    pub out_dir: PathBuf,
    /// Files this command wrote, relative to `out_dir`.
    pub artifacts: Vec<Artifact>,
    /// Command-specific headline numbers.
    pub summary: serde_json::Value,
}
