//! Run configuration: one TOML document with `key=value` overrides on top.

use std::path::PathBuf;

use intake_core::data::Stage;
use intake_core::dataset::SyntheticSpec;
use intake_core::encoder::BackendKind;
use intake_core::fusion::{FusionConfig, Projection};
use intake_core::training::TrainConfig;
use intake_core::vlm::{ClientConfig, MissingPolicy, Strategy};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Defaults to the manifest `synth-gen` writes under the output directory.
    pub manifest: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_count: 1000,
            synthetic: SyntheticSpec { seed: 7, ..Default::default() },
            train_fraction: 0.8,
            split_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: BackendKind,
    /// Directory holding `model.safetensors` and tokenizer files (pretrained backend).
    pub weights_dir: Option<PathBuf>,
    /// Feature cache root; caching is off when unset.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to the Stage-1 checkpoint for `eval`, Stage-2 for `eval-diff`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub checkpoint: Option<PathBuf>,
    /// First test sample when unset.
    pub sample: Option<String>,
    /// First item of the sample when unset.
    pub item: Option<String>,
    pub alpha: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { checkpoint: None, sample: None, item: None, alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotsConfig {
    /// Evaluation report to plot; the `eval-diff` report when unset.
    pub report: Option<PathBuf>,
    pub bins: usize,
}

impl Default for PlotsConfig {
    fn default() -> Self {
        Self { report: None, bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmConfig {
    pub client: ClientConfig,
    pub strategy: Strategy,
    pub missing_policy: MissingPolicy,
    /// Benchmark every sample instead of the held-out split.
    pub all_samples: bool,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            client: ClientConfig::default(),
            strategy: Strategy::PredictedDifference,
            missing_policy: MissingPolicy::default(),
            all_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, replaces the synthetic, init and training seeds.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub heatmap: HeatmapConfig,
    pub plots: PlotsConfig,
    pub vlm: VlmConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults sized for the stub encoder on a CPU.
    fn default() -> Self {
        Self {
            seed: None,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig {
                d_k: 16,
                heads: 4,
                projection: Projection::Identity,
                init_seed: 1,
                ..Default::default()
            },
            stage1: TrainConfig { stage: Stage::Absolute, epochs: 30, base_lr: 1e-2, ..Default::default() },
            stage2: TrainConfig { stage: Stage::Difference, epochs: 150, base_lr: 1e-2, ..Default::default() },
            eval: EvalConfig::default(),
            heatmap: HeatmapConfig::default(),
            plots: PlotsConfig::default(),
            vlm: VlmConfig::default(),
        }
    }
}

/// Sets `dotted.key = value` in a TOML tree. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("override key `{key}` is malformed")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = tree;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("config key `{}` is not a table", parts[..=i].join(".")))
        })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// File text (may be empty), then overrides in order; unknown keys are rejected.
    pub fn load(file_text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut tree: toml::Table =
            toml::from_str(file_text).map_err(|e| PipelineError::Config(format!("config file: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let de = toml::Value::Table(tree);
        let mut config: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            PipelineError::Config(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        config.finish()?;
        Ok(config)
    }

    fn finish(&mut self) -> Result<(), PipelineError> {
        if let Some(seed) = self.seed {
            self.data.synthetic.seed = seed;
            self.fusion.init_seed = seed;
            self.stage1.seed = seed;
            self.stage2.seed = seed;
        }
        self.stage1.stage = Stage::Absolute;
        self.stage2.stage = Stage::Difference;
        let bad = |what: &str, e: String| PipelineError::Config(format!("{what}: {e}"));
        self.fusion.validate().map_err(|e| bad("fusion", e.to_string()))?;
        self.stage1.validate().map_err(|e| bad("stage1", e.to_string()))?;
        // init_from defaults to the Stage-1 checkpoint at run time.
        let mut stage2 = self.stage2.clone();
        stage2.init_from.get_or_insert_with(|| PathBuf::from("stage1"));
        stage2.validate().map_err(|e| bad("stage2", e.to_string()))?;
        self.data.synthetic.validate().map_err(|e| bad("data.synthetic", e.to_string()))?;
        self.vlm.client.validate().map_err(|e| bad("vlm.client", e.to_string()))?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(bad("data.train_fraction", "must lie in (0, 1)".into()));
        }
        if self.data.synthetic_count == 0 {
            return Err(bad("data.synthetic_count", "must be positive".into()));
        }
        if self.plots.bins == 0 {
            return Err(bad("plots.bins", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.heatmap.alpha) {
            return Err(bad("heatmap.alpha", "must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}
