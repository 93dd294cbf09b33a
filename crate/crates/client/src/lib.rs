//! Thin async client for the intake service.

use std::time::Duration;

use intake_pipeline::api::{ErrorBody, Health, JobRequest, JobStatus};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach service: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("{}", .0.message)]
    Api(ErrorBody),
    #[error("unexpected status {status}: {body}")]
    Unexpected { status: StatusCode, body: String },
}

#[derive(Debug, Clone)]
pub struct IntakeClient {
    base: String,
    http: reqwest::Client,
}

impl IntakeClient {
    /// `base_url` like `http://127.0.0.1:8080`.
    pub fn new(base_url: &str) -> Self {
        Self { base: base_url.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let body = resp.text().await?;
        match serde_json::from_str::<ErrorBody>(&body) {
            Ok(e) => Err(ClientError::Api(e)),
            Err(_) => Err(ClientError::Unexpected { status, body }),
        }
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Self::decode(self.http.get(format!("{}/v1/health", self.base)).send().await?).await
    }

    pub async fn submit(&self, request: &JobRequest) -> Result<JobStatus, ClientError> {
        Self::decode(self.http.post(format!("{}/v1/jobs", self.base)).json(request).send().await?).await
    }

    pub async fn status(&self, id: &str) -> Result<JobStatus, ClientError> {
        Self::decode(self.http.get(format!("{}/v1/jobs/{id}", self.base)).send().await?).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>, ClientError> {
        Self::decode(self.http.get(format!("{}/v1/jobs", self.base)).send().await?).await
    }

    pub async fn cancel(&self, id: &str) -> Result<JobStatus, ClientError> {
        Self::decode(self.http.post(format!("{}/v1/jobs/{id}/cancel", self.base)).send().await?).await
    }

    /// Polls until the job reaches a terminal state, reporting each poll.
    pub async fn wait(
        &self,
        id: &str,
        every: Duration,
        mut on_poll: impl FnMut(&JobStatus),
    ) -> Result<JobStatus, ClientError> {
        loop {
            let s = self.status(id).await?;
            on_poll(&s);
            if s.state.is_terminal() {
                return Ok(s);
            }
            tokio::time::sleep(every).await;
        }
    }

    /// Submits and waits.
    pub async fn run(&self, request: &JobRequest, every: Duration, on_poll: impl FnMut(&JobStatus)) -> Result<JobStatus, ClientError> {
        let queued = self.submit(request).await?;
        self.wait(&queued.id, every, on_poll).await
    }
}
