//! Frozen feature extraction behind a single [`Encoder`] interface.
//!
//! Two backends ship: [`StubEncoder`], a deterministic hand-built projection
//! that needs no weights, and [`ClipEncoder`], a CLIP ViT adapter that reads
//! HuggingFace-layout safetensors. [`CachedEncoder`] wraps either with an
//! on-disk feature cache.

mod cache;
mod clip;
mod prompt;
mod stub;
mod tokenizer;

use std::path::PathBuf;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{read_matrix, write_matrix, CachedEncoder};
pub use clip::{ClipEncoder, ClipTensors};
pub use prompt::{build_prompt, PromptError};
pub use stub::{StubConfig, StubEncoder};
pub use tokenizer::ClipTokenizer;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("malformed weights: {0}")]
    Weights(String),
    #[error("stub construction: {0}")]
    Stub(String),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Before,
    After,
}

/// N x D_I patch embedding matrix of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub matrix: Array2<f64>,
    pub source: ImageSource,
}

impl PatchFeatures {
    pub fn num_patches(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|v| v.is_finite())
    }
}

/// Pooled 1 x D_T text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature {
    pub vector: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub name: String,
    pub image_dim: usize,
    pub text_dim: usize,
    pub num_patches: usize,
    pub image_side: u32,
    pub patch_side: u32,
    pub frozen: bool,
}

impl EncoderInfo {
    pub fn grid_side(&self) -> usize {
        (self.image_side / self.patch_side) as usize
    }
}

/// A frozen vision-language backbone.
///
/// Implementations take `&self` only; nothing can update backbone parameters
/// after construction.
pub trait Encoder: Send + Sync {
    fn info(&self) -> EncoderInfo;
    fn encode_image(&self, image: &RgbImage, source: ImageSource) -> Result<PatchFeatures, EncoderError>;
    fn encode_text(&self, prompt: &str) -> Result<TextFeature, EncoderError>;
    /// SHA-256 over every backbone parameter, hex encoded.
    fn parameter_digest(&self) -> String;
}

/// Resizes the short side to `side` and center-crops to a square.
pub fn fit_square(image: &RgbImage, side: u32, filter: FilterType) -> Result<RgbImage, EncoderError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(EncoderError::InvalidImage("zero-sized image".into()));
    }
    if w == side && h == side {
        return Ok(image.clone());
    }
    let scale = side as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(side);
    let nh = ((h as f64 * scale).round() as u32).max(side);
    let resized = image::imageops::resize(image, nw, nh, filter);
    let x = (nw - side) / 2;
    let y = (nh - side) / 2;
    Ok(image::imageops::crop_imm(&resized, x, y, side, side).to_image())
}

/// Which backend a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Pretrained,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_square_handles_real_image_sizes() {
        let img = RgbImage::from_fn(640, 480, |x, _| image::Rgb([(x % 256) as u8, 0, 0]));
        let out = fit_square(&img, 336, FilterType::Triangle).unwrap();
        assert_eq!(out.dimensions(), (336, 336));
        let tall = RgbImage::new(100, 900);
        assert_eq!(fit_square(&tall, 336, FilterType::Triangle).unwrap().dimensions(), (336, 336));
        let exact = RgbImage::new(336, 336);
        assert_eq!(fit_square(&exact, 336, FilterType::Triangle).unwrap(), exact);
        assert!(fit_square(&RgbImage::new(0, 5), 336, FilterType::Triangle).is_err());
    }
}
