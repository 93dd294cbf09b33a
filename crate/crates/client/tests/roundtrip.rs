use std::time::Duration;

use intake_client::{ClientError, IntakeClient};
use intake_pipeline::api::{JobRequest, JobState};
use intake_pipeline::Command;
use intake_server::{serve, AppState};

async fn start() -> IntakeClient {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    tokio::spawn(serve(listener, AppState::default()));
    IntakeClient::new(&url)
}

fn req(command: Command, out: &std::path::Path, overrides: &[&str]) -> JobRequest {
    JobRequest {
        command,
        config_toml: String::new(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
        out_dir: out.to_path_buf(),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_to_completion() {
    let c = start().await;
    assert!(!c.base_url().ends_with('/'));
    assert_eq!(c.health().await.unwrap().status, "ok");
    let dir = tempfile::tempdir().unwrap();
    let mut polls = 0;
    let s = c
        .run(&req(Command::SynthGen, dir.path(), &["data.synthetic_count=4"]), Duration::from_millis(20), |_| polls += 1)
        .await
        .unwrap();
    assert_eq!(s.state, JobState::Succeeded);
    assert!(polls >= 1);
    assert_eq!(s.outcome.unwrap().summary["samples"], 4);
    assert_eq!(c.jobs().await.unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn api_errors_carry_exit_codes() {
    let c = start().await;
    let dir = tempfile::tempdir().unwrap();
    match c.submit(&req(Command::Eval, dir.path(), &["stage1.nope=1"])).await {
        Err(ClientError::Api(e)) => assert_eq!(e.exit_code, 2),
        other => panic!("expected api error, got {other:?}"),
    }
    match c.status("missing").await {
        Err(ClientError::Api(e)) => assert_eq!(e.kind, "not_found"),
        other => panic!("expected not found, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queued_job_cancels_immediately() {
    let c = start().await;
    let dir = tempfile::tempdir().unwrap();
    let busy = c.submit(&req(Command::SynthGen, dir.path(), &["data.synthetic_count=300"])).await.unwrap();
    while c.status(&busy.id).await.unwrap().state == JobState::Queued {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let queued = c.submit(&req(Command::SynthGen, dir.path(), &["data.synthetic_count=1"])).await.unwrap();
    let s = c.cancel(&queued.id).await.unwrap();
    assert_eq!(s.state, JobState::Cancelled);
    let s = c.wait(&busy.id, Duration::from_millis(20), |_| {}).await.unwrap();
    assert_eq!(s.state, JobState::Succeeded);
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert_eq!(c.status(&queued.id).await.unwrap().state, JobState::Cancelled);
}

#[tokio::test]
async fn unreachable_service_is_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    assert!(matches!(IntakeClient::new(&url).health().await, Err(ClientError::Transport(_))));
}
