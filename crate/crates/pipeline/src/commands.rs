use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use intake_core::data::{queries_for, ItemQuery, Sample, Stage};
use intake_core::dataset::{generate_synthetic, load_manifest_shared, split, write_synthetic, DatasetError};
use intake_core::encoder::{BackendKind, CachedEncoder, ClipEncoder, Encoder, EncoderError, StubEncoder};
use intake_core::evaluation::{predict_queries, EvalReport, Level, PredictError, RunMetadata};
use intake_core::features::FeatureError;
use intake_core::fusion::{attention_halves, load_checkpoint, Checkpoint, FusionError};
use intake_core::training::{train_stage1, train_stage2, TrainError, TrainHooks, TrainReport};
use intake_core::viz::{histogram, histogram_svg, joint_density, joint_svg, overlay, VizError};
use intake_core::vlm::{make_client, run_benchmark, BenchOptions, VlmError};
use serde_json::json;

use crate::{ArtifactManifest, Command, Outcome, PipelineConfig, PipelineError, RunHooks, RunRequest};
use crate::EFFECTIVE_CONFIG_FILE;

pub const SYNTHETIC_DIR: &str = "synthetic";
pub const CHECKPOINT_FILE: &str = "checkpoint.ikpt";

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<EncoderError> for PipelineError {
    fn from(e: EncoderError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidConfig(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<PredictError> for PipelineError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Features(f) => f.into(),
            PredictError::Fusion(f) => f.into(),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => PipelineError::Config(m),
            TrainError::Data(m) => PipelineError::Data(m),
            TrainError::Fusion(FusionError::InvalidConfig(m)) => PipelineError::Config(m),
            TrainError::Fusion(f @ (FusionError::Checkpoint(_) | FusionError::CheckpointMismatch(_))) => {
                PipelineError::Data(f.to_string())
            }
            TrainError::Features(f) => f.into(),
            TrainError::Encoder(f) => f.into(),
            other => PipelineError::Training(other.to_string()),
        }
    }
}

impl From<VlmError> for PipelineError {
    fn from(e: VlmError) -> Self {
        match e {
            VlmError::Config(m) => PipelineError::Config(m),
            VlmError::Data(m) | VlmError::Io(m) => PipelineError::Data(m),
            VlmError::NoIngredients => PipelineError::Data(e.to_string()),
            other => PipelineError::Provider(other.to_string()),
        }
    }
}

impl From<VizError> for PipelineError {
    fn from(e: VizError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn io_data(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<PathBuf, PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_data(path))?;
    Ok(path.to_path_buf())
}

fn mkdir(path: &Path) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::Config(format!("output dir {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

struct Ctx<'a> {
    config: &'a PipelineConfig,
    out: &'a Path,
    hooks: &'a RunHooks,
}

impl Ctx<'_> {
    fn manifest_path(&self) -> PathBuf {
        self.config.data.manifest.clone().unwrap_or_else(|| self.out.join(SYNTHETIC_DIR).join("manifest.jsonl"))
    }

    fn samples(&self) -> Result<Vec<Arc<Sample>>, PipelineError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(PipelineError::Data(format!("manifest {} not found (run synth-gen first?)", path.display())));
        }
        Ok(load_manifest_shared(&path)?)
    }

    fn split(&self) -> Result<(Vec<Arc<Sample>>, Vec<Arc<Sample>>), PipelineError> {
        let all = self.samples()?;
        Ok(split(&all, self.config.data.train_fraction, self.config.data.split_seed)?)
    }

    fn encoder(&self) -> Result<Arc<dyn Encoder>, PipelineError> {
        let enc: Arc<dyn Encoder> = match self.config.encoder.backend {
            BackendKind::Stub => Arc::new(StubEncoder::new(self.config.data.synthetic.stub_config())?),
            BackendKind::Pretrained => {
                let dir = self.config.encoder.weights_dir.as_ref().ok_or_else(|| {
                    PipelineError::Config("encoder.weights_dir is required for the pretrained backend".into())
                })?;
                Arc::new(ClipEncoder::load(dir)?)
            }
        };
        Ok(match &self.config.encoder.cache_dir {
            Some(root) => Arc::new(CachedEncoder::new(enc, root)),
            None => enc,
        })
    }

    fn checkpoint(&self, path: &Path) -> Result<Checkpoint, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::Data(format!("checkpoint {} not found", path.display())));
        }
        Ok(load_checkpoint(path)?)
    }

    fn train_hooks(&self, dir: &Path) -> TrainHooks {
        TrainHooks {
            log_path: Some(dir.join("train_log.jsonl")),
            checkpoint_path: Some(dir.join(CHECKPOINT_FILE)),
            cancel: self.hooks.cancel.clone(),
            on_step: self.hooks.on_step.clone(),
        }
    }
}

/// Runs one command, echoes the effective config and updates `artifacts.json`.
///
/// Blocking; from async code call it through `spawn_blocking`.
pub fn run(request: &RunRequest, hooks: &RunHooks) -> Result<Outcome, PipelineError> {
    let out = mkdir(&request.out_dir)?;
    let ctx = Ctx { config: &request.config, out: &out, hooks };
    let cfg_path = out.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&cfg_path, request.config.to_toml())
        .map_err(|e| PipelineError::Config(format!("output dir {} not writable: {e}", out.display())))?;
    tracing::info!(command = %request.command, out = %out.display(), "running");

    let (mut files, summary) = match request.command {
        Command::SynthGen => synth_gen(&ctx)?,
        Command::TrainStage1 => train_stage(&ctx, Stage::Absolute)?,
        Command::TrainStage2 => train_stage(&ctx, Stage::Difference)?,
        Command::Eval => eval(&ctx, Stage::Absolute)?,
        Command::EvalDiff => eval(&ctx, Stage::Difference)?,
        Command::Heatmap => heatmap(&ctx)?,
        Command::Plots => plots(&ctx)?,
        Command::VlmBench => vlm_bench(&ctx)?,
    };
    files.insert(0, cfg_path);
    let mut manifest = ArtifactManifest::load(&out)?;
    let artifacts = manifest.record(&out, &files)?;
    manifest.save(&out)?;
    Ok(Outcome { command: request.command, out_dir: out, artifacts, summary })
}

type Produced = (Vec<PathBuf>, serde_json::Value);

fn synth_gen(ctx: &Ctx) -> Result<Produced, PipelineError> {
    let data = &ctx.config.data;
    let samples = generate_synthetic(&data.synthetic, data.synthetic_count)?;
    let dir = mkdir(&ctx.out.join(SYNTHETIC_DIR))?;
    let written = write_synthetic(&samples, &dir)?;
    let items: usize = samples.iter().map(|s| s.sample.items().len()).sum();
    let mut files = vec![written.manifest.clone(), written.truth.clone()];
    files.extend(written.images);
    Ok((files, json!({ "samples": samples.len(), "items": items, "manifest": written.manifest })))
}

fn stage_queries(samples: &[Arc<Sample>], stage: Stage) -> Result<Vec<ItemQuery>, PipelineError> {
    let usable: Vec<Arc<Sample>> = match stage {
        Stage::Absolute => samples.to_vec(),
        Stage::Difference => samples.iter().filter(|s| s.has_difference_data()).cloned().collect(),
    };
    queries_for(&usable, stage).map_err(|e| PipelineError::Data(e.to_string()))
}

/// Training report without the wall clock, so reruns digest identically.
fn report_json(report: &TrainReport) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_secs");
        o.remove("checkpoint");
    }
    v
}

fn train_stage(ctx: &Ctx, stage: Stage) -> Result<Produced, PipelineError> {
    let (train, _) = ctx.split()?;
    let encoder = ctx.encoder()?;
    let queries = stage_queries(&train, stage)?;
    if queries.is_empty() {
        return Err(PipelineError::Data(format!("no {stage} training queries in the train split")));
    }
    let (dir, result) = match stage {
        Stage::Absolute => {
            let dir = mkdir(&ctx.out.join("stage1"))?;
            let r = train_stage1(&queries, &ctx.config.stage1, &ctx.config.fusion, encoder.as_ref(), &ctx.train_hooks(&dir));
            (dir, r)
        }
        Stage::Difference => {
            let dir = mkdir(&ctx.out.join("stage2"))?;
            let mut config = ctx.config.stage2.clone();
            if config.init_from.is_none() && !config.allow_fresh_stage2 {
                let p = ctx.out.join("stage1").join(CHECKPOINT_FILE);
                if !p.exists() {
                    return Err(PipelineError::Data(format!(
                        "stage-1 checkpoint {} not found (run train-stage1 or set stage2.init_from)",
                        p.display()
                    )));
                }
                config.init_from = Some(p);
            }
            let r = train_stage2(&queries, &config, &ctx.config.fusion, encoder.as_ref(), &ctx.train_hooks(&dir));
            (dir, r)
        }
    };
    let (ck, report) = result?;
    let report_path = write_json(&dir.join("train_report.json"), &report_json(&report))?;
    let last = report.epochs.last();
    let summary = json!({
        "queries": queries.len(),
        "steps": report.steps.len(),
        "final_reg": last.map(|e| e.reg),
        "final_cont": last.map(|e| e.cont),
        "param_digest": ck.params().digest(),
        "encoder_digest": report.encoder_digest,
        "wall_clock_secs": report.wall_clock_secs,
    });
    Ok((vec![dir.join(CHECKPOINT_FILE), dir.join("train_log.jsonl"), report_path], summary))
}

fn default_checkpoint(ctx: &Ctx, stage: Stage) -> PathBuf {
    let sub = if stage == Stage::Absolute { "stage1" } else { "stage2" };
    ctx.out.join(sub).join(CHECKPOINT_FILE)
}

fn eval(ctx: &Ctx, stage: Stage) -> Result<Produced, PipelineError> {
    let path = ctx.config.eval.checkpoint.clone().unwrap_or_else(|| default_checkpoint(ctx, stage));
    let ck = ctx.checkpoint(&path)?;
    let (train, test) = ctx.split()?;
    let encoder = ctx.encoder()?;
    let queries = stage_queries(&test, stage)?;
    if queries.is_empty() {
        return Err(PipelineError::Data(format!("no {stage} queries in the test split")));
    }
    let (items, _) = predict_queries(&ck.model, &queries, encoder.as_ref())?;
    let train_targets: Vec<f64> = stage_queries(&train, stage)?.iter().map(ItemQuery::target).collect();
    let mut ids: Vec<&str> = queries.iter().map(|q| q.sample().sample_id()).collect();
    ids.dedup();
    let metadata = RunMetadata {
        checkpoint_digest: ck.params().digest(),
        dataset_tag: test.first().map(|s| s.dataset_tag().to_string()).unwrap_or_default(),
        seed: ck.header.seed,
        stage,
    };
    let report = EvalReport::build(metadata, items, &ids, (!train_targets.is_empty()).then_some(&train_targets[..]))
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let name = if stage == Stage::Absolute { "eval" } else { "eval_diff" };
    let dir = mkdir(&ctx.out.join(name))?;
    let report_path = dir.join("report.json");
    report.write(&report_path).map_err(io_data(&report_path))?;
    let item = report.pooled(Level::Item);
    let summary = json!({
        "n": item.map(|r| r.n),
        "item_mae": item.map(|r| r.mae),
        "item_pmae": item.and_then(|r| r.pmae),
        "dish_pmae": report.pooled(Level::Dish).and_then(|r| r.pmae),
        "baseline_pmae": report.baseline.as_ref().and_then(|r| r.pmae),
    });
    Ok((vec![report_path], summary))
}

fn heatmap(ctx: &Ctx) -> Result<Produced, PipelineError> {
    let hc = &ctx.config.heatmap;
    let path = hc.checkpoint.clone().unwrap_or_else(|| default_checkpoint(ctx, Stage::Absolute));
    let ck = ctx.checkpoint(&path)?;
    let sample = match &hc.sample {
        Some(id) => ctx
            .samples()?
            .into_iter()
            .find(|s| s.sample_id() == id)
            .ok_or_else(|| PipelineError::Data(format!("sample `{id}` not in the manifest")))?,
        None => ctx.split()?.1.into_iter().next().ok_or_else(|| PipelineError::Data("test split is empty".into()))?,
    };
    let index = match &hc.item {
        Some(name) => sample
            .items()
            .iter()
            .position(|i| i.name() == name)
            .ok_or_else(|| PipelineError::Data(format!("sample {} has no item `{name}`", sample.sample_id())))?,
        None => 0,
    };
    let stage = if ck.header.stage == Stage::Difference && sample.has_difference_data() {
        Stage::Difference
    } else {
        Stage::Absolute
    };
    let query = ItemQuery::new(Arc::clone(&sample), index, stage).map_err(|e| PipelineError::Data(e.to_string()))?;
    let encoder = ctx.encoder()?;
    let side = encoder.info().grid_side();
    let (items, outs) = predict_queries(&ck.model, std::slice::from_ref(&query), encoder.as_ref())?;
    let attention = &outs[0].attention;
    let (before, after) = attention_halves(attention, side)?;

    let dir = mkdir(&ctx.out.join("heatmap"))?;
    let load = |r: &intake_core::data::ImageRef| r.load().map_err(|e| PipelineError::Data(e.to_string()));
    let before_img = load(sample.before_image())?;
    // A Stage-1 query attends the before image in both halves.
    let after_img = match (stage, sample.after_image()) {
        (Stage::Difference, Some(r)) => load(r)?,
        _ => Arc::clone(&before_img),
    };
    let mut files = Vec::new();
    for (name, img, grid) in [("before", &before_img, &before), ("after", &after_img, &after)] {
        let p = dir.join(format!("{name}.png"));
        overlay(img, grid, hc.alpha)?.save(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
        files.push(p);
    }
    let raw = json!({
        "sample_id": sample.sample_id(),
        "item": query.item().name(),
        "stage": stage,
        "grid_side": side,
        "prediction": items[0].prediction,
        "target": items[0].target,
        "attention": attention.to_vec(),
    });
    files.push(write_json(&dir.join("attention.json"), &raw)?);
    let summary = json!({
        "sample_id": sample.sample_id(),
        "item": query.item().name(),
        "before_mass": before.sum(),
        "after_mass": after.sum(),
        "prediction": items[0].prediction,
    });
    Ok((files, summary))
}

fn plots(ctx: &Ctx) -> Result<Produced, PipelineError> {
    let path = ctx.config.plots.report.clone().unwrap_or_else(|| ctx.out.join("eval_diff").join("report.json"));
    let text = fs::read_to_string(&path).map_err(io_data(&path))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let bins = ctx.config.plots.bins;
    let what = if report.metadata.stage == Stage::Absolute { "weight" } else { "weight difference" };
    let hist = histogram(&report.items, bins)?;
    let density = joint_density(&report.items, bins)?;
    let dir = mkdir(&ctx.out.join("plots"))?;
    let hp = dir.join("histogram.svg");
    fs::write(&hp, histogram_svg(&hist, &format!("Predicted vs true {what} (g)"))).map_err(io_data(&hp))?;
    let jp = dir.join("joint_density.svg");
    fs::write(&jp, joint_svg(&report.items, &density, &format!("Predicted vs true {what} (g)")))
        .map_err(io_data(&jp))?;
    let dp = write_json(&dir.join("plot_data.json"), &json!({ "histogram": hist, "joint_density": density }))?;
    let summary = json!({ "n": report.items.len(), "bins": bins, "on_diagonal": density.on_diagonal });
    Ok((vec![hp, jp, dp], summary))
}

fn vlm_bench(ctx: &Ctx) -> Result<Produced, PipelineError> {
    let vc = &ctx.config.vlm;
    let samples = if vc.all_samples { ctx.samples()? } else { ctx.split()?.1 };
    let client = make_client(&vc.client, &samples)?;
    let dir = mkdir(&ctx.out.join("vlm"))?;
    let audit = dir.join("audit.jsonl");
    let options = BenchOptions { missing_policy: vc.missing_policy, audit_path: Some(audit.clone()) };
    let fut = run_benchmark(&samples, vc.strategy, client, &vc.client, &options);
    let outcome = match tokio::runtime::Handle::try_current() {
        Ok(h) => h.block_on(fut),
        Err(_) => tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| PipelineError::Provider(e.to_string()))?
            .block_on(fut),
    }?;
    let report_path = write_json(
        &dir.join("report.json"),
        &json!({
            "strategy": outcome.strategy,
            "report": outcome.report,
            "items": outcome.items,
            "missing": outcome.missing,
        }),
    )?;
    let summary = json!({
        "strategy": outcome.strategy,
        "dish_mae": outcome.report.mae,
        "dish_pmae": outcome.report.pmae,
        "n": outcome.report.n,
        "missing": outcome.missing.len(),
    });
    Ok((vec![report_path, audit], summary))
}
