//! `intake`: command-line client of the intake service.
//!
//! Without `--server` an in-process service is started on a loopback port.
//! Exit codes: 0 ok, 1 service unreachable, 2 config, 3 data, 4 training, 5 provider.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use intake_client::{ClientError, IntakeClient};
use intake_pipeline::api::{ErrorBody, JobRequest, JobState, JobStatus};
use intake_pipeline::Command;
use intake_server::AppState;

#[derive(Parser)]
#[command(name = "intake", version, about = "Text-guided food weight estimation pipeline")]
struct Cli {
    /// Service URL; an in-process service is used when omitted.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset with exact ground truth.
    SynthGen(RunArgs),
    /// Absolute-weight training.
    TrainStage1(RunArgs),
    /// Weight-difference fine-tuning from the Stage-1 checkpoint.
    TrainStage2(RunArgs),
    /// Absolute-weight metrics on the held-out split.
    Eval(RunArgs),
    /// Difference metrics on the held-out split.
    EvalDiff(RunArgs),
    /// Attention overlays for one sample and item.
    Heatmap(RunArgs),
    /// Histogram and joint-density figures from an evaluation report.
    Plots(RunArgs),
    /// Prompted VLM baseline.
    VlmBench(RunArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Jobs that may run at once.
        #[arg(long, default_value_t = 1)]
        max_jobs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Pretrained,
    Stub,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    ImageAndText,
    ImageOnly,
    TextOnly,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set stage1.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

impl RunArgs {
    fn request(&self, command: Command) -> Result<JobRequest, ErrorBody> {
        let config_toml = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ErrorBody {
                kind: "config".into(),
                message: format!("config file {}: {e}", p.display()),
                exit_code: 2,
            })?,
            None => String::new(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(b) = self.backend {
            let name = match b {
                Backend::Pretrained => "pretrained",
                Backend::Stub => "stub",
            };
            overrides.push(format!("encoder.backend=\"{name}\""));
        }
        if let Some(a) = self.ablation {
            let name = match a {
                AblationArg::ImageAndText => "image_and_text",
                AblationArg::ImageOnly => "image_only",
                AblationArg::TextOnly => "text_only",
            };
            overrides.push(format!("fusion.ablation=\"{name}\""));
        }
        Ok(JobRequest { command, config_toml, overrides, out_dir: absolute(&self.out) })
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn split(cmd: Cmd) -> Result<(Command, RunArgs), Cmd> {
    Ok(match cmd {
        Cmd::SynthGen(a) => (Command::SynthGen, a),
        Cmd::TrainStage1(a) => (Command::TrainStage1, a),
        Cmd::TrainStage2(a) => (Command::TrainStage2, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::EvalDiff(a) => (Command::EvalDiff, a),
        Cmd::Heatmap(a) => (Command::Heatmap, a),
        Cmd::Plots(a) => (Command::Plots, a),
        Cmd::VlmBench(a) => (Command::VlmBench, a),
        other => return Err(other),
    })
}

fn fail(e: &ErrorBody) -> ExitCode {
    eprintln!("error: {}", e.message);
    ExitCode::from(e.exit_code as u8)
}

async fn serve(addr: &str, max_jobs: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("intake service listening on http://{}", listener.local_addr()?);
    intake_server::serve(listener, AppState::new(max_jobs)).await?;
    Ok(())
}

async fn client_for(server: Option<String>) -> anyhow::Result<IntakeClient> {
    if let Some(url) = server {
        return Ok(IntakeClient::new(&url));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let url = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move {
        if let Err(e) = intake_server::serve(listener, AppState::default()).await {
            tracing::error!("in-process service stopped: {e}");
        }
    });
    Ok(IntakeClient::new(&url))
}

fn report_progress(last_epoch: &mut Option<usize>, s: &JobStatus) {
    if let Some(p) = s.progress {
        if *last_epoch != Some(p.epoch) {
            *last_epoch = Some(p.epoch);
            eprintln!("epoch {:>4} step {:>6} reg {:.4} cont {:.4}", p.epoch, p.step, p.reg, p.cont);
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();
    let cli = Cli::parse();
    let (command, args) = match split(cli.command) {
        Ok(x) => x,
        Err(Cmd::Serve { addr, max_jobs }) => {
            return match serve(&addr, max_jobs).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            };
        }
        Err(_) => unreachable!("every other subcommand is a pipeline command"),
    };
    let request = match args.request(command) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let client = match client_for(cli.server).await {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let mut last_epoch = None;
    let result = client.run(&request, Duration::from_millis(250), |s| report_progress(&mut last_epoch, s)).await;
    match result {
        Ok(s) if s.state == JobState::Succeeded => {
            let outcome = s.outcome.expect("succeeded job has an outcome");
            println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Ok(s) => match &s.error {
            Some(e) => fail(e),
            None => {
                eprintln!("error: job {} ended {:?}", s.id, s.state);
                ExitCode::from(4)
            }
        },
        Err(ClientError::Api(e)) => fail(&e),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
