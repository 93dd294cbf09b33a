//! Line-delimited JSON manifests.
//!
//! One record per line:
//! `{"schema_version":1,"sample_id":..,"before_image":..,"after_image":..,
//!   "items":[{"name":..,"weight_before_g":..,"weight_after_g":..,"structure":..}],
//!   "dataset_tag":..}`
//!
//! Relative image paths resolve against the manifest's directory. Optional
//! `boxes` metadata (bounding-box annotations) is accepted and ignored.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::data::{DataError, FoodItem, ImageRef, Sample, StructureTag};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    name: String,
    weight_before_g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_after_g: Option<f64>,
    #[serde(default)]
    structure: StructureTag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    #[serde(default = "default_version")]
    schema_version: u32,
    sample_id: String,
    before_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    after_image: Option<PathBuf>,
    items: Vec<ItemRecord>,
    #[serde(default)]
    dataset_tag: String,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    boxes: Option<serde_json::Value>,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn to_sample(rec: SampleRecord, base: &Path) -> Result<Sample, DataError> {
    if rec.schema_version != SCHEMA_VERSION {
        return Err(DataError::Invalid {
            field: "schema_version",
            reason: format!("unsupported schema version {}", rec.schema_version),
        });
    }
    let items = rec
        .items
        .into_iter()
        .map(|it| FoodItem::new(it.name, it.weight_before_g, it.weight_after_g, it.structure))
        .collect::<Result<Vec<_>, _>>()?;
    Sample::new(
        rec.sample_id,
        ImageRef::Path(resolve(base, rec.before_image)),
        rec.after_image.map(|p| ImageRef::Path(resolve(base, p))),
        items,
        rec.dataset_tag,
    )
}

/// Parses manifest text. `base` anchors relative image paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<Sample>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("duplicate sample_id `{}`", rec.sample_id),
            });
        }
        let sample = to_sample(rec, base).map_err(|e| match e {
            DataError::Invalid { field, reason } => DatasetError::Validation { line: line_no, field, reason },
            other => DatasetError::Validation { line: line_no, field: "sample", reason: other.to_string() },
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
        text.push_str(&line);
        text.push('\n');
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Same as [`load_manifest`] but wraps each sample in an `Arc`.
pub fn load_manifest_shared(path: &Path) -> Result<Vec<Arc<Sample>>, DatasetError> {
    Ok(load_manifest(path)?.into_iter().map(Arc::new).collect())
}

fn image_path(img: &ImageRef, sample_id: &str) -> Result<PathBuf, DatasetError> {
    img.path()
        .map(Path::to_path_buf)
        .ok_or_else(|| DatasetError::Unserializable(format!("sample `{sample_id}` holds an in-memory image")))
}

/// Serializes samples to manifest text. In-memory images cannot be written.
pub fn render_manifest<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<String, DatasetError> {
    let mut out = String::new();
    for s in samples {
        let rec = SampleRecord {
            schema_version: SCHEMA_VERSION,
            sample_id: s.sample_id().to_string(),
            before_image: image_path(s.before_image(), s.sample_id())?,
            after_image: s.after_image().map(|a| image_path(a, s.sample_id())).transpose()?,
            items: s
                .items()
                .iter()
                .map(|it| ItemRecord {
                    name: it.name().to_string(),
                    weight_before_g: it.weight_before(),
                    weight_after_g: it.weight_after(),
                    structure: it.structure(),
                })
                .collect(),
            dataset_tag: s.dataset_tag().to_string(),
            boxes: None,
        };
        out.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest<'a>(path: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<(), DatasetError> {
    let text = render_manifest(samples)?;
    let io = |e| DatasetError::Io { path: path.to_path_buf(), source: e };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(text.as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}
