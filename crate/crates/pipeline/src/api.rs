//! Wire types of the HTTP/JSON service.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{Command, Outcome, PipelineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub command: Command,
    /// TOML text of the config file; empty for defaults.
    #[serde(default)]
    pub config_toml: String,
    /// `dotted.key=value` assignments applied after the file.
    #[serde(default)]
    pub overrides: Vec<String>,
    /// Output directory on the server's filesystem.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub reg: f64,
    pub cont: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// `config`, `data`, `training`, `provider` or `not_found`.
    pub kind: String,
    pub message: String,
    /// Process exit code the CLI reports for this error.
    pub exit_code: i32,
}

impl From<&PipelineError> for ErrorBody {
    fn from(e: &PipelineError) -> Self {
        let kind = match e {
            PipelineError::Config(_) => "config",
            PipelineError::Data(_) => "data",
            PipelineError::Training(_) => "training",
            PipelineError::Provider(_) => "provider",
        };
        Self { kind: kind.into(), message: e.to_string(), exit_code: e.exit_code() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub command: Command,
    pub state: JobState,
    pub progress: Option<Progress>,
    pub outcome: Option<Outcome>,
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}
