//! On-disk feature cache.
//!
//! Layout: `<root>/<backend>/<sha256 of input>.bin`. Each file is a 16-byte
//! header (`magic`, `dtype`, `rows`, `cols` as little-endian u32) followed by
//! row-major little-endian f64 values. Writes go to a temp file first and are
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderError, EncoderInfo, ImageSource, PatchFeatures, TextFeature};

pub const CACHE_MAGIC: u32 = u32::from_le_bytes(*b"IFC1");
pub const DTYPE_F64: u32 = 1;

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<(), EncoderError> {
    let err = |e: std::io::Error| EncoderError::Cache { path: path.to_path_buf(), message: e.to_string() };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(err)?;
    let mut buf = Vec::with_capacity(16 + 8 * m.len());
    for v in [CACHE_MAGIC, DTYPE_F64, m.nrows() as u32, m.ncols() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut tmp = tempfile_in(dir).map_err(err)?;
    tmp.1.write_all(&buf).map_err(err)?;
    tmp.1.sync_all().map_err(err)?;
    drop(tmp.1);
    fs::rename(&tmp.0, path).map_err(err)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    let name = format!(".tmp-{}-{}", std::process::id(), uuid_like());
    let p = dir.join(name);
    let f = fs::OpenOptions::new().write(true).create_new(true).open(&p)?;
    Ok((p, f))
}

fn uuid_like() -> String {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{nanos:x}-{}", COUNTER.fetch_add(1, Ordering::Relaxed))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, EncoderError> {
    let bytes = fs::read(path).map_err(|e| EncoderError::Cache { path: path.to_path_buf(), message: e.to_string() })?;
    let bad = |m: &str| EncoderError::Cache { path: path.to_path_buf(), message: m.to_string() };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    if word(1) != DTYPE_F64 {
        return Err(bad("unsupported dtype"));
    }
    let (rows, cols) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(bad("length does not match header"));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))
}

/// Memoizes an inner encoder's outputs on disk.
pub struct CachedEncoder {
    inner: Arc<dyn Encoder>,
    dir: PathBuf,
}

impl CachedEncoder {
    pub fn new(inner: Arc<dyn Encoder>, root: &Path) -> Self {
        let dir = root.join(inner.info().name);
        Self { inner, dir }
    }

    pub fn image_key(image: &RgbImage) -> String {
        let mut h = Sha256::new();
        h.update(b"image");
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        hex::encode(h.finalize())
    }

    pub fn text_key(prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(b"text");
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    fn cached(&self, key: &str, compute: impl FnOnce() -> Result<Array2<f64>, EncoderError>) -> Result<Array2<f64>, EncoderError> {
        let path = self.path_for(key);
        if let Ok(m) = read_matrix(&path) {
            return Ok(m);
        }
        let m = compute()?;
        write_matrix(&path, &m)?;
        Ok(m)
    }
}

impl Encoder for CachedEncoder {
    fn info(&self) -> EncoderInfo {
        self.inner.info()
    }

    fn encode_image(&self, image: &RgbImage, source: ImageSource) -> Result<PatchFeatures, EncoderError> {
        let matrix = self.cached(&Self::image_key(image), || Ok(self.inner.encode_image(image, source)?.matrix))?;
        Ok(PatchFeatures { matrix, source })
    }

    fn encode_text(&self, prompt: &str) -> Result<TextFeature, EncoderError> {
        if prompt.trim().is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let m = self.cached(&Self::text_key(prompt), || {
            let v = self.inner.encode_text(prompt)?.vector;
            let n = v.len();
            Ok(v.into_shape_with_order((1, n)).expect("vector reshapes"))
        })?;
        Ok(TextFeature { vector: Array1::from_iter(m.iter().copied()) })
    }

    fn parameter_digest(&self) -> String {
        self.inner.parameter_digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{StubConfig, StubEncoder};

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 * 10.0 + j as f64 + 0.25);
        write_matrix(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"IFC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn corrupted_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, b"IFC1\x01\0\0\0\x05\0\0\0\x05\0\0\0").unwrap();
        assert!(read_matrix(&p).is_err());
        fs::write(&p, b"XXXX").unwrap();
        assert!(read_matrix(&p).is_err());
    }

    #[test]
    fn cache_hits_return_identical_features() {
        let dir = tempfile::tempdir().unwrap();
        let inner: Arc<dyn Encoder> = Arc::new(StubEncoder::new(StubConfig::default()).unwrap());
        let cached = CachedEncoder::new(Arc::clone(&inner), dir.path());
        let img = RgbImage::from_fn(336, 336, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let a = cached.encode_image(&img, ImageSource::Before).unwrap();
        let key = CachedEncoder::image_key(&img);
        assert!(dir.path().join("stub").join(format!("{key}.bin")).exists());
        let b = cached.encode_image(&img, ImageSource::After).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(b.source, ImageSource::After);
        assert_eq!(a, inner.encode_image(&img, ImageSource::Before).unwrap());
        let t1 = cached.encode_text("hello there").unwrap();
        assert_eq!(t1, cached.encode_text("hello there").unwrap());
        assert_eq!(t1, inner.encode_text("hello there").unwrap());
    }
}
