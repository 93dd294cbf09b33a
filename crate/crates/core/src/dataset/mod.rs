//! Dataset ingestion, splitting and synthetic generation.

mod manifest;
mod split;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{load_manifest, load_manifest_shared, parse_manifest, render_manifest, save_manifest, SCHEMA_VERSION};
pub use split::split;
pub use synthetic::{
    default_classes, generate_synthetic, load_truth, write_synthetic, EllipseTruth, SyntheticClass,
    SyntheticOutput, SyntheticSample, SyntheticSpec,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid `{field}`: {reason}")]
    Validation { line: usize, field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("empty input")]
    EmptyInput,
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("cannot serialize: {0}")]
    Unserializable(String),
}
