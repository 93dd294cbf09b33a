//! Two-stage trainer: absolute weights on before-images, then weight
//! differences on before/after pairs starting from the Stage-1 checkpoint.

mod optim;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{AdamW, Schedule};

use crate::data::{ItemQuery, Stage};
use crate::encoder::{Encoder, EncoderError};
use crate::features::{encode_queries, input_dims, FeatureError};
use crate::fusion::{
    load_checkpoint, save_checkpoint, Ablation, Checkpoint, FusionConfig, FusionError, FusionInput, FusionModel,
    FusionParams, Linear,
};
use crate::objectives::{info_nce_grad, l1_regression_grad, total_loss, LossWeights, ObjectiveError};

/// Batch elements summed into one gradient buffer before the ordered reduction.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("io {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("encoder parameters changed during training")]
    FrozenViolation,
    #[error("non-finite loss at step {0}")]
    Diverged(usize),
    #[error("cancelled")]
    Cancelled,
}

/// How the head's fixed output gain is chosen for a freshly initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetScale {
    /// Keep `FusionConfig::output_gain`.
    Fixed,
    /// Set the gain to the mean absolute training target.
    #[default]
    TrainMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub init_from: Option<PathBuf>,
    /// Permits Stage 2 without `init_from`.
    pub allow_fresh_stage2: bool,
    /// Re-initialize the regression head after loading `init_from`.
    pub reset_head: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub target_scale: TargetScale,
    /// Stops after this many optimizer steps; the schedule still spans all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Absolute,
            base_lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 150,
            batch_size: 32,
            schedule: Schedule::Cosine,
            loss_weights: LossWeights::default(),
            seed: 0,
            init_from: None,
            allow_fresh_stage2: false,
            reset_head: false,
            grad_clip: None,
            target_scale: TargetScale::TrainMean,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.stage == Stage::Difference && self.init_from.is_none() && !self.allow_fresh_stage2 {
            return bad("stage 2 needs init_from (or allow_fresh_stage2)");
        }
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub reg: f64,
    pub cont: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reg: f64,
    pub cont: f64,
    pub total: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub total_steps: usize,
    pub output_gain: f64,
    pub checkpoint: Option<PathBuf>,
    pub param_digest: String,
    pub encoder_digest: String,
    pub wall_clock_secs: f64,
}

/// Side channels of a run: files, progress and cancellation.
#[derive(Default, Clone)]
pub struct TrainHooks {
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub cancel: Option<Arc<AtomicBool>>,
    pub on_step: Option<Arc<dyn Fn(&StepRecord) + Send + Sync>>,
}

pub fn train_stage1(
    queries: &[ItemQuery],
    config: &TrainConfig,
    fusion: &FusionConfig,
    encoder: &dyn Encoder,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    if config.stage != Stage::Absolute {
        return Err(TrainError::Config("train_stage1 needs stage = absolute".into()));
    }
    train(queries, config, fusion, encoder, hooks)
}

pub fn train_stage2(
    queries: &[ItemQuery],
    config: &TrainConfig,
    fusion: &FusionConfig,
    encoder: &dyn Encoder,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    if config.stage != Stage::Difference {
        return Err(TrainError::Config("train_stage2 needs stage = difference".into()));
    }
    train(queries, config, fusion, encoder, hooks)
}

/// Model to start from: a checkpoint for `init_from`, a fresh one otherwise.
pub fn initial_model(
    config: &TrainConfig,
    fusion: &FusionConfig,
    encoder: &dyn Encoder,
    targets: &[f64],
) -> Result<FusionModel, TrainError> {
    let dims = input_dims(encoder);
    match &config.init_from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let c = ck.config();
            if c.d_k != fusion.d_k || c.heads != fusion.heads || c.ablation != fusion.ablation {
                return Err(FusionError::CheckpointMismatch(format!(
                    "checkpoint has d_k={} heads={} ablation={}, run wants d_k={} heads={} ablation={}",
                    c.d_k,
                    c.heads,
                    c.ablation.as_str(),
                    fusion.d_k,
                    fusion.heads,
                    fusion.ablation.as_str()
                ))
                .into());
            }
            if ck.model.dims != dims {
                return Err(FusionError::CheckpointMismatch(format!(
                    "checkpoint built for {:?}, encoder gives {dims:?}",
                    ck.model.dims
                ))
                .into());
            }
            let mut model = ck.model;
            if config.reset_head {
                let fresh = FusionParams::init(&model.config, dims);
                model.params.head = Linear { w: fresh.head.w, b: fresh.head.b };
            }
            Ok(model)
        }
        None => {
            let mut cfg = fusion.clone();
            if config.target_scale == TargetScale::TrainMean {
                let mean = targets.iter().map(|t| t.abs()).sum::<f64>() / targets.len().max(1) as f64;
                if mean > 0.0 {
                    cfg.output_gain = mean;
                }
            }
            Ok(FusionModel::new(cfg, dims)?)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.to_path_buf(), message: e.to_string() }
}

pub fn train(
    queries: &[ItemQuery],
    config: &TrainConfig,
    fusion: &FusionConfig,
    encoder: &dyn Encoder,
    hooks: &TrainHooks,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    let started = Instant::now();
    config.validate()?;
    fusion.validate()?;
    if queries.is_empty() {
        return Err(TrainError::Data("no training queries".into()));
    }
    if let Some(q) = queries.iter().find(|q| q.stage() != config.stage) {
        return Err(TrainError::Data(format!(
            "query for sample {} has stage {}, run is {}",
            q.sample().sample_id(),
            q.stage(),
            config.stage
        )));
    }
    if let (Some(init), Some(out)) = (&config.init_from, &hooks.checkpoint_path) {
        if init == out || fs::canonicalize(init).ok() == fs::canonicalize(out).ok() {
            return Err(TrainError::Config("output checkpoint would overwrite init_from".into()));
        }
    }
    let encoder_digest = encoder.parameter_digest();
    let targets: Vec<f64> = queries.iter().map(ItemQuery::target).collect();
    let mut model = initial_model(config, fusion, encoder, &targets)?;
    let inputs = encode_queries(queries, encoder)?;

    let steps_per_epoch = queries.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let run_steps = config.max_steps.map_or(total_steps, |m| m.min(total_steps));
    let use_cont = config.loss_weights.lambda_cont > 0.0 && model.config.ablation == Ablation::ImageAndText;

    let mut log = match &hooks.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            Some(BufWriter::new(fs::File::create(p).map_err(io_err(p))?))
        }
        None => None,
    };

    let mut opt = AdamW::new(&model.params, config.weight_decay);
    let mut steps = Vec::with_capacity(run_steps);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut step = 0;
    'outer: for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let first = steps.len();
        for batch in order.chunks(config.batch_size) {
            if step >= run_steps {
                break 'outer;
            }
            if hooks.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(TrainError::Cancelled);
            }
            let lr = config.schedule.lr(config.base_lr, step, total_steps);
            let (reg, cont, grad) = batch_gradient(&model, &inputs, &targets, batch, &config.loss_weights, use_cont)?;
            let mut grad = grad;
            if let Some(c) = config.grad_clip {
                let n = grad.l2_norm();
                if n > c {
                    grad.scale(c / n);
                }
            }
            opt.step(&mut model.params, &grad, lr);
            let b = total_loss(reg, cont, &config.loss_weights);
            if !b.total.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let rec = StepRecord { stage: config.stage, epoch, step, reg, cont, total: b.total, lr };
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(io_err(hooks.log_path.as_deref().unwrap()))?;
            }
            if let Some(f) = &hooks.on_step {
                f(&rec);
            }
            steps.push(rec);
            step += 1;
        }
        let done = &steps[first..];
        if !done.is_empty() {
            let k = done.len() as f64;
            epochs.push(EpochRecord {
                epoch,
                reg: done.iter().map(|r| r.reg).sum::<f64>() / k,
                cont: done.iter().map(|r| r.cont).sum::<f64>() / k,
                total: done.iter().map(|r| r.total).sum::<f64>() / k,
                lr: done[0].lr,
            });
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(io_err(hooks.log_path.as_deref().unwrap()))?;
    }
    if encoder.parameter_digest() != encoder_digest {
        return Err(TrainError::FrozenViolation);
    }

    let output_gain = model.config.output_gain;
    let ck = Checkpoint::new(model, config.seed, config.stage, step as u64, &encoder.info().name, &encoder_digest);
    if let Some(p) = &hooks.checkpoint_path {
        save_checkpoint(p, &ck)?;
    }
    let report = TrainReport {
        stage: config.stage,
        epochs,
        steps,
        total_steps,
        output_gain,
        checkpoint: hooks.checkpoint_path.clone(),
        param_digest: ck.params().digest(),
        encoder_digest,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((ck, report))
}

/// Mean regression loss, contrastive loss and the gradient of their weighted sum.
pub fn batch_gradient(
    model: &FusionModel,
    inputs: &[FusionInput],
    targets: &[f64],
    batch: &[usize],
    weights: &LossWeights,
    use_cont: bool,
) -> Result<(f64, f64, FusionParams), TrainError> {
    let fwd: Vec<_> = batch.par_iter().map(|&i| model.forward_train(&inputs[i])).collect::<Result<_, _>>()?;
    let preds: Vec<f64> = fwd.iter().map(|(o, _)| o.prediction).collect();
    let tgts: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
    let (reg, d_pred) = l1_regression_grad(&preds, &tgts)?;
    let d = model.config.d_k;
    let (cont, dz, dq) = if use_cont {
        let z = Array2::from_shape_fn((batch.len(), d), |(r, c)| fwd[r].0.z_attn[c]);
        let q = Array2::from_shape_fn((batch.len(), d), |(r, c)| fwd[r].0.q_text[c]);
        let (l, dz, dq) = info_nce_grad(&z, &q, weights.temperature)?;
        (l, Some(dz * weights.lambda_cont), Some(dq * weights.lambda_cont))
    } else {
        (0.0, None, None)
    };

    let idx: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<FusionParams> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = model.params.zeros_like();
            for &k in chunk {
                let dzk = dz.as_ref().map(|m| m.row(k).to_owned());
                let dqk = dq.as_ref().map(|m| m.row(k).to_owned());
                model.backward(&fwd[k].1, weights.lambda_reg * d_pred[k], dzk.as_ref(), dqk.as_ref(), &mut g);
            }
            g
        })
        .collect();
    let mut parts = partials.into_iter();
    let mut grad = parts.next().expect("non-empty batch");
    for p in parts {
        grad.add_assign(&p);
    }
    Ok((reg, cont, grad))
}
