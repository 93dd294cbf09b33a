//! Provider-agnostic VLM clients: an OpenAI-compatible HTTP client, mocks and
//! a network-free replay store.

use std::collections::HashMap;
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use futures::future::BoxFuture;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AuditRecord, PromptRole, VlmError};
use crate::data::Sample;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Worth retrying (timeouts, 429, 5xx).
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("provider error: {0}")]
    Fatal(String),
    #[error("no recorded response for sample {sample_id} prompt {prompt_digest}")]
    NotRecorded { sample_id: String, prompt_digest: String },
}

/// One request: prompt text plus its images in order.
#[derive(Clone)]
pub struct VlmRequest {
    pub sample_id: String,
    pub prompt_digest: String,
    pub role: PromptRole,
    pub text: String,
    pub expected_keys: Vec<String>,
    pub images: Vec<Arc<RgbImage>>,
}

pub trait VlmClient: Send + Sync {
    fn complete<'a>(&'a self, request: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>>;
    /// True when the client never touches the network.
    fn offline(&self) -> bool;
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// `openai_compatible`, `mock_echo`, `mock_empty` or `replay`.
    pub provider: String,
    pub base_url: String,
    pub model: String,
    pub max_tokens: u32,
    pub greedy: bool,
    /// Used when `greedy` is false; provider default when unset.
    pub temperature: Option<f64>,
    pub max_in_flight: usize,
    pub api_key_env: String,
    pub replay_path: Option<std::path::PathBuf>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            provider: "mock_echo".into(),
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            max_tokens: 512,
            greedy: true,
            temperature: None,
            max_in_flight: 4,
            api_key_env: "VLM_API_KEY".into(),
            replay_path: None,
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

impl fmt::Debug for ClientConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientConfig")
            .field("provider", &self.provider)
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("max_tokens", &self.max_tokens)
            .field("greedy", &self.greedy)
            .field("max_in_flight", &self.max_in_flight)
            .field("api_key_env", &self.api_key_env)
            .finish_non_exhaustive()
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), VlmError> {
        if self.max_in_flight == 0 {
            return Err(VlmError::Config("max_in_flight must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(VlmError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Answers with the ground truth of the sample each request names.
pub struct MockEcho {
    truth: HashMap<String, Arc<Sample>>,
}

impl MockEcho {
    pub fn new(samples: &[Arc<Sample>]) -> Self {
        Self { truth: samples.iter().map(|s| (s.sample_id().to_string(), Arc::clone(s))).collect() }
    }
}

impl VlmClient for MockEcho {
    fn complete<'a>(&'a self, request: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>> {
        Box::pin(async move {
            let s = self
                .truth
                .get(&request.sample_id)
                .ok_or_else(|| ProviderError::Fatal(format!("unknown sample {}", request.sample_id)))?;
            let mut out = serde_json::Map::new();
            for it in s.items() {
                let v = match request.role {
                    PromptRole::Single | PromptRole::Before => it.weight_before(),
                    PromptRole::After => it.weight_after().unwrap_or(0.0),
                    PromptRole::ConsumedPair => it.consumed().unwrap_or(0.0),
                };
                out.insert(it.name().to_string(), json!(v));
            }
            Ok(serde_json::Value::Object(out).to_string())
        })
    }

    fn offline(&self) -> bool {
        true
    }
}

/// Always answers `{}`.
pub struct MockEmpty;

impl VlmClient for MockEmpty {
    fn complete<'a>(&'a self, _: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>> {
        Box::pin(async { Ok("{}".to_string()) })
    }

    fn offline(&self) -> bool {
        true
    }
}

/// Serves responses recorded in an audit log; never opens a socket.
pub struct ReplayClient {
    store: HashMap<(String, String), String>,
}

impl ReplayClient {
    pub fn from_records(records: impl IntoIterator<Item = AuditRecord>) -> Self {
        Self { store: records.into_iter().map(|r| ((r.sample_id, r.prompt_digest), r.raw)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, VlmError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| VlmError::Io(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            records.push(
                serde_json::from_str(line).map_err(|e| VlmError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

impl VlmClient for ReplayClient {
    fn complete<'a>(&'a self, request: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>> {
        let key = (request.sample_id.clone(), request.prompt_digest.clone());
        let found = self.store.get(&key).cloned();
        Box::pin(async move {
            found.ok_or(ProviderError::NotRecorded { sample_id: key.0, prompt_digest: key.1 })
        })
    }

    fn offline(&self) -> bool {
        true
    }
}

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct HttpClient {
    http: reqwest::Client,
    config: ClientConfig,
    api_key: String,
}

impl HttpClient {
    /// Reads the API key from the environment variable named in the config.
    pub fn new(config: ClientConfig) -> Result<Self, VlmError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| VlmError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| VlmError::Config(e.to_string()))?;
        Ok(Self { http, config, api_key })
    }

    fn body(&self, request: &VlmRequest) -> Result<serde_json::Value, ProviderError> {
        let mut content = vec![json!({"type": "text", "text": request.text})];
        for img in &request.images {
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| ProviderError::Fatal(format!("png encode: {e}")))?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
            content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
        }
        let mut body = json!({
            "model": self.config.model,
            "max_tokens": self.config.max_tokens,
            "messages": [{"role": "user", "content": content}],
        });
        if self.config.greedy {
            body["temperature"] = json!(0.0);
        } else if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        Ok(body)
    }
}

impl VlmClient for HttpClient {
    fn complete<'a>(&'a self, request: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>> {
        Box::pin(async move {
            let body = self.body(request)?;
            let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
            let resp = self
                .http
                .post(url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .await
                .map_err(|e| ProviderError::Transient(e.without_url().to_string()))?;
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                return Err(ProviderError::Transient(format!("status {status}")));
            }
            if !status.is_success() {
                return Err(ProviderError::Fatal(format!("status {status}")));
            }
            let v: serde_json::Value =
                resp.json().await.map_err(|e| ProviderError::Transient(e.without_url().to_string()))?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| ProviderError::Fatal("response has no message content".into()))
        })
    }

    fn offline(&self) -> bool {
        false
    }
}

impl fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpClient").field("config", &self.config).field("api_key", &"<redacted>").finish()
    }
}

/// Builds the client a config names. Mock clients need the samples.
pub fn make_client(config: &ClientConfig, samples: &[Arc<Sample>]) -> Result<Arc<dyn VlmClient>, VlmError> {
    config.validate()?;
    match config.provider.as_str() {
        "mock_echo" => Ok(Arc::new(MockEcho::new(samples))),
        "mock_empty" => Ok(Arc::new(MockEmpty)),
        "replay" => {
            let p = config.replay_path.as_ref().ok_or_else(|| VlmError::Config("replay needs replay_path".into()))?;
            Ok(Arc::new(ReplayClient::load(p)?))
        }
        "openai_compatible" => Ok(Arc::new(HttpClient::new(config.clone())?)),
        other => Err(VlmError::Config(format!("unknown provider `{other}`"))),
    }
}
