//! VLM baseline harness: prompt construction, clients, structured-output
//! parsing and dish-level scoring of the single-image and before/after
//! strategies.

mod bench;
mod client;
mod parse;
mod prompts;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{run_benchmark, BenchOptions, BenchOutcome, MissingSample};
pub use client::{
    make_client, ClientConfig, HttpClient, MockEcho, MockEmpty, ProviderError, ReplayClient, VlmClient, VlmRequest,
};
pub use parse::{parse_structured, MissingPolicy, Repair, VlmResponse};
pub use prompts::{
    build_pair_prompts, build_single_prompt, render_ing_list, ImageSlot, PromptRole, Strategy, VlmPrompt, RULES,
};

use crate::evaluation::EvalError;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("ingredient list is empty")]
    NoIngredients,
    #[error("vlm config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("every sample failed; first error: {0}")]
    AllSamplesFailed(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One line of the response audit log, also the replay store format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample_id: String,
    pub prompt_digest: String,
    pub raw: String,
    pub timestamp: String,
}
