//! Checkpoint file: `IKPT`, u32 version, u64 header length, JSON header,
//! then every tensor as little-endian f64 in [`FusionParams::tensors`] order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionConfig, FusionError, FusionModel, FusionParams, InputDims};
use crate::data::Stage;

const MAGIC: &[u8; 4] = b"IKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: FusionConfig,
    pub dims: InputDims,
    pub seed: u64,
    pub stage: Stage,
    pub step: u64,
    pub encoder_name: String,
    pub encoder_digest: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: FusionModel,
}

impl Checkpoint {
    pub fn new(model: FusionModel, seed: u64, stage: Stage, step: u64, encoder_name: &str, encoder_digest: &str) -> Self {
        let tensors =
            model.params.tensors().into_iter().map(|(name, shape, _)| TensorEntry { name, shape }).collect();
        let header = CheckpointHeader {
            config: model.config.clone(),
            dims: model.dims,
            seed,
            stage,
            step,
            encoder_name: encoder_name.to_string(),
            encoder_digest: encoder_digest.to_string(),
            tensors,
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FusionError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.model.params.num_values());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, _, values) in self.model.params.tensors() {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusionError> {
        let bad = |m: String| FusionError::Checkpoint(m);
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut model = FusionModel::new(header.config.clone(), header.dims)?;
        let expected: Vec<TensorEntry> =
            model.params.tensors().into_iter().map(|(name, shape, _)| TensorEntry { name, shape }).collect();
        if expected != header.tensors {
            return Err(bad("tensor layout does not match config".into()));
        }
        let mut values = bytes[16 + hlen..].chunks_exact(8);
        if values.len() != model.params.num_values() || !values.remainder().is_empty() {
            return Err(bad("tensor data length does not match header".into()));
        }
        for t in model.params.tensors_mut() {
            for slot in t.iter_mut() {
                *slot = f64::from_le_bytes(values.next().expect("length checked").try_into().unwrap());
            }
        }
        Ok(Self { header, model })
    }

    pub fn params(&self) -> &FusionParams {
        &self.model.params
    }

    pub fn config(&self) -> &FusionConfig {
        &self.model.config
    }
}

/// Writes through a temp file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FusionError> {
    let io = |e: std::io::Error| FusionError::Checkpoint(format!("{}: {e}", path.display()));
    let bytes = ckpt.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let tmp = dir.join(format!(".{}.tmp-{}", path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FusionError> {
    let bytes = fs::read(path).map_err(|e| FusionError::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{Ablation, FusionInput};
    use ndarray::{Array1, Array2};
    use std::sync::Arc;

    fn model(ablation: Ablation, heads: usize) -> FusionModel {
        let cfg = FusionConfig { d_k: 8, ffn_hidden: 12, heads, ablation, init_seed: 9, ..Default::default() };
        FusionModel::new(cfg, InputDims { image_dim: 5, text_dim: 6, num_patches: 4 }).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (i, ablation) in Ablation::ALL.into_iter().enumerate() {
            let mut m = model(ablation, 1 + i % 2);
            m.params.source.fill(0.1 / 3.0);
            let ck = Checkpoint::new(m.clone(), 42, Stage::Difference, 1234, "stub", "abc");
            let p = dir.path().join(format!("m{i}.ckpt"));
            save_checkpoint(&p, &ck).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(back, ck);
            let input = FusionInput::new(
                Arc::new(Array2::from_shape_fn((4, 5), |(r, c)| (r * 5 + c) as f64 / 7.0)),
                Arc::new(Array2::from_elem((4, 5), 0.3)),
                Arc::new(Array1::from_elem(6, -0.2)),
            );
            let a = m.forward(&input).unwrap();
            let b = back.model.forward(&input).unwrap();
            assert_eq!(a.prediction.to_bits(), b.prediction.to_bits());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let ck = Checkpoint::new(model(Ablation::ImageAndText, 1), 0, Stage::Absolute, 0, "stub", "d");
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
