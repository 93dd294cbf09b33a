//! HTTP/JSON service that runs pipeline commands as background jobs.
//!
//! Routes:
//! - `GET  /v1/health`
//! - `POST /v1/jobs` with a [`JobRequest`], answers `202` and the queued [`JobStatus`]
//! - `GET  /v1/jobs`, `GET /v1/jobs/{id}`
//! - `POST /v1/jobs/{id}/cancel`

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intake_core::training::StepRecord;
use intake_pipeline::api::{ErrorBody, Health, JobRequest, JobState, JobStatus, Progress};
use intake_pipeline::{run, PipelineConfig, PipelineError, RunHooks, RunRequest};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

struct Job {
    status: JobStatus,
    cancel: Arc<AtomicBool>,
    order: usize,
}

/// Job registry shared by the handlers.
#[derive(Clone)]
pub struct AppState {
    jobs: Arc<Mutex<HashMap<String, Job>>>,
    slots: Arc<Semaphore>,
}

impl AppState {
    /// `max_running` jobs execute at once; the rest wait queued.
    pub fn new(max_running: usize) -> Self {
        Self { jobs: Arc::default(), slots: Arc::new(Semaphore::new(max_running.max(1))) }
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().expect("job registry poisoned").get_mut(id) {
            f(&mut job.status);
        }
    }
}

impl Default for AppState {
    fn default() -> Self {
        Self::new(1)
    }
}

struct ApiError(StatusCode, ErrorBody);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, ErrorBody { kind: "not_found".into(), message: format!("no job `{id}`"), exit_code: 3 })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/jobs", post(submit).get(list))
        .route("/v1/jobs/{id}", get(status))
        .route("/v1/jobs/{id}/cancel", post(cancel))
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn submit(State(state): State<AppState>, Json(req): Json<JobRequest>) -> Result<(StatusCode, Json<JobStatus>), ApiError> {
    let config = PipelineConfig::load(&req.config_toml, &req.overrides)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, ErrorBody::from(&e)))?;
    let id = uuid::Uuid::new_v4().to_string();
    let status = JobStatus { id: id.clone(), command: req.command, state: JobState::Queued, progress: None, outcome: None, error: None };
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let mut jobs = state.jobs.lock().expect("job registry poisoned");
        let order = jobs.len();
        jobs.insert(id.clone(), Job { status: status.clone(), cancel: Arc::clone(&cancel), order });
    }
    tracing::info!(job = id.as_str(), command = %req.command, "queued");

    let request = RunRequest { command: req.command, config, out_dir: req.out_dir };
    let st = state.clone();
    tokio::spawn(async move {
        let _slot = st.slots.acquire().await.expect("semaphore open");
        if cancel.load(Ordering::Relaxed) {
            return;
        }
        st.update(&id, |s| s.state = JobState::Running);
        let progress_state = st.clone();
        let progress_id = id.clone();
        let hooks = RunHooks {
            on_step: Some(Arc::new(move |r: &StepRecord| {
                progress_state.update(&progress_id, |s| {
                    s.progress = Some(Progress { epoch: r.epoch, step: r.step, reg: r.reg, cont: r.cont });
                });
            })),
            cancel: Some(Arc::clone(&cancel)),
        };
        let result = tokio::task::spawn_blocking(move || run(&request, &hooks))
            .await
            .unwrap_or_else(|e| Err(PipelineError::Training(format!("job panicked: {e}"))));
        let cancelled = cancel.load(Ordering::Relaxed);
        st.update(&id, |s| match result {
            Ok(outcome) => {
                s.state = JobState::Succeeded;
                s.outcome = Some(outcome);
            }
            Err(e) => {
                s.state = if cancelled { JobState::Cancelled } else { JobState::Failed };
                s.error = Some(ErrorBody::from(&e));
            }
        });
        tracing::info!(job = id.as_str(), "finished");
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn list(State(state): State<AppState>) -> Json<Vec<JobStatus>> {
    let jobs = state.jobs.lock().expect("job registry poisoned");
    let mut all: Vec<&Job> = jobs.values().collect();
    all.sort_by_key(|j| j.order);
    Json(all.into_iter().map(|j| j.status.clone()).collect())
}

async fn status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    let jobs = state.jobs.lock().expect("job registry poisoned");
    jobs.get(&id).map(|j| Json(j.status.clone())).ok_or_else(|| not_found(&id))
}

async fn cancel(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    let mut jobs = state.jobs.lock().expect("job registry poisoned");
    let job = jobs.get_mut(&id).ok_or_else(|| not_found(&id))?;
    job.cancel.store(true, Ordering::Relaxed);
    if job.status.state == JobState::Queued {
        job.status.state = JobState::Cancelled;
    }
    Ok(Json(job.status.clone()))
}
