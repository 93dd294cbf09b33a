//! Trainable fusion network: projection MLPs, patch-axis concatenation of the
//! before and after patches, text-queried cross-attention, residual FFN and a
//! linear regression head.

mod checkpoint;
mod layers;
mod model;
mod params;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use layers::{gelu, gelu_grad, rms_norm_rows, rms_norm_rows_backward, Linear, Mlp, MlpCache, RMS_EPS};
pub use model::{attention_halves, cross_attend, cross_attend_backward, FusionCache, FusionInput, FusionModel};
pub use params::FusionParams;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    ImageAndText,
    ImageOnly,
    TextOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::ImageAndText, Ablation::ImageOnly, Ablation::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::ImageAndText => "image_and_text",
            Ablation::ImageOnly => "image_only",
            Ablation::TextOnly => "text_only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Mlp,
    /// Test mode: features pass through unchanged (needs D_I = D_T = d_k).
    Identity,
    /// `x + MLP(x)` with a zero-initialized output layer, so training starts
    /// from the encoder's joint space (needs D_I = D_T = d_k).
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_k: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub ablation: Ablation,
    pub init_seed: u64,
    pub projection: Projection,
    /// Parameter-free RMS normalization of keys/values and query before attention.
    pub pre_norm: bool,
    /// Fixed scale on the head output, in grams per unit.
    pub output_gain: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_k: 512,
            ffn_hidden: 2048,
            heads: 1,
            ablation: Ablation::ImageAndText,
            init_seed: 0,
            projection: Projection::Mlp,
            pre_norm: false,
            output_gain: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        if self.d_k == 0 {
            return bad("d_k must be positive".into());
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        if self.heads == 0 || self.d_k % self.heads != 0 {
            return bad(format!("heads ({}) must divide d_k ({})", self.heads, self.d_k));
        }
        if !(self.output_gain.is_finite() && self.output_gain > 0.0) {
            return bad("output_gain must be finite and positive".into());
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: InputDims) -> Result<(), FusionError> {
        self.validate()?;
        if dims.num_patches == 0 || dims.image_dim == 0 || dims.text_dim == 0 {
            return Err(FusionError::ShapeMismatch(format!("degenerate input dims {dims:?}")));
        }
        if self.projection != Projection::Mlp && (dims.image_dim != self.d_k || dims.text_dim != self.d_k) {
            return Err(FusionError::ShapeMismatch(format!(
                "{:?} projection needs D_I = D_T = d_k, got {} / {} / {}",
                self.projection, dims.image_dim, dims.text_dim, self.d_k
            )));
        }
        Ok(())
    }
}

/// Encoder-side shapes the network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub image_dim: usize,
    pub text_dim: usize,
    /// Patches per image (N); attention runs over 2N rows.
    pub num_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// 2N weights, head-averaged. Entries 0..N belong to the before image.
    pub attention: Array1<f64>,
    pub z_attn: Array1<f64>,
    pub h_res: Array1<f64>,
    pub q_text: Array1<f64>,
    pub prediction: f64,
}

impl FusionOutput {
    pub fn is_finite(&self) -> bool {
        self.prediction.is_finite()
            && [&self.attention, &self.z_attn, &self.h_res, &self.q_text].iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Projected image rows and text query.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    /// 2N x d_k, before rows first.
    pub h_img: Array2<f64>,
    pub q_text: Array1<f64>,
}
