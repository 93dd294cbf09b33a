//! `artifacts.json`: every file the pipeline wrote, with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

pub const MANIFEST_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    Ok((hex::encode(h.finalize()), n))
}

impl ArtifactManifest {
    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }

    /// Digests `files` (absolute or relative to `out_dir`) and records them.
    pub fn record(&mut self, out_dir: &Path, files: &[impl AsRef<Path>]) -> Result<Vec<Artifact>, PipelineError> {
        let mut added = Vec::new();
        for f in files {
            let f = f.as_ref();
            let full = if f.is_absolute() { f.to_path_buf() } else { out_dir.join(f) };
            let rel = full.strip_prefix(out_dir).unwrap_or(&full);
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            let (sha256, bytes) =
                sha256_file(&full).map_err(|e| PipelineError::Data(format!("{}: {e}", full.display())))?;
            let a = Artifact { path: key.clone(), sha256, bytes };
            self.artifacts.insert(key, a.clone());
            added.push(a);
        }
        Ok(added)
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        fs::write(&p, "abc").unwrap();
        let (d, n) = sha256_file(&p).unwrap();
        assert_eq!(d, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(n, 3);
    }

    #[test]
    fn record_merges_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "1").unwrap();
        fs::write(dir.path().join("b.txt"), "2").unwrap();
        let mut m = ArtifactManifest::default();
        m.record(dir.path(), &[dir.path().join("sub/a.txt")]).unwrap();
        m.record(dir.path(), &["b.txt"]).unwrap();
        fs::write(dir.path().join("b.txt"), "3").unwrap();
        m.record(dir.path(), &["b.txt"]).unwrap();
        m.save(dir.path()).unwrap();
        let back = ArtifactManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.artifacts.keys().collect::<Vec<_>>(), ["b.txt", "sub/a.txt"]);
        assert_eq!(back.artifacts["b.txt"].sha256, sha256_file(&dir.path().join("b.txt")).unwrap().0);
    }
}
