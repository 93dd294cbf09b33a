//! Deterministic weight-free backend.
//!
//! Image side: each `patch x patch` tile is summarised as
//! `(mean R, mean G, mean B, std of gray)` in [0, 1] and multiplied by a
//! seeded `D x 4` matrix. Text side: whitespace tokens are hashed into a
//! 64-bin weighted bag and multiplied by a seeded `D x 64` matrix.
//!
//! Generic text columns are projected onto the orthogonal complement of the
//! image projection's column space, so they carry no image similarity. The
//! column of each registered class token is the image-space dual of a
//! direction that separates that class's color statistics from every other
//! registered color, which gives
//! `<text(c), patch(color c)> > <text(c), patch(color c')>` for all `c' != c`.

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{fit_square, Encoder, EncoderError, EncoderInfo, ImageSource, PatchFeatures, TextFeature};

pub const TEXT_BINS: usize = 64;
const STATS: usize = 4;
/// Words of both prompt templates; class tokens must not share their bins.
const TEMPLATE_WORDS: [&str; 11] =
    ["what", "is", "the", "weight", "of", "in", "this", "image", "difference", "these", "images"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubConfig {
    pub image_side: u32,
    pub patch_side: u32,
    /// Shared embedding width (D_I = D_T).
    pub dim: usize,
    pub seed: u64,
    /// Class-name tokens with their RGB colors.
    pub classes: Vec<(String, [u8; 3])>,
    /// Extra colors the class directions must also separate from (e.g. background).
    pub contrast_colors: Vec<[u8; 3]>,
    /// Gain on class-token columns.
    pub class_gain: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            image_side: 336,
            patch_side: 14,
            dim: 16,
            seed: 0x5EED,
            classes: Vec::new(),
            contrast_colors: Vec::new(),
            class_gain: 96.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubEncoder {
    config: StubConfig,
    image_proj: Array2<f64>,
    text_proj: Array2<f64>,
    salt: u64,
}

/// Gray-level and channel statistics of one image region.
pub(crate) fn patch_stats(img: &RgbImage, x0: u32, y0: u32, side: u32) -> [f64; STATS] {
    let mut sum = [0.0; 3];
    let mut gray_sum = 0.0;
    let mut gray_sq = 0.0;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let p = img.get_pixel(x, y).0;
            let rgb = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
            for c in 0..3 {
                sum[c] += rgb[c];
            }
            let g = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            gray_sum += g;
            gray_sq += g * g;
        }
    }
    let n = (side * side) as f64;
    let mean_g = gray_sum / n;
    let var = (gray_sq / n - mean_g * mean_g).max(0.0);
    [sum[0] / n, sum[1] / n, sum[2] / n, var.sqrt()]
}

fn color_stats(c: [u8; 3]) -> [f64; STATS] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0, 0.0]
}

/// Normalized token stream: lowercase, edge punctuation stripped.
pub(crate) fn tokens(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_').to_lowercase())
        .filter(|t| !t.is_empty())
}

/// (bin, weight) for a token under a salt. Weight lies in [1, 2).
pub(crate) fn token_slot(salt: u64, token: &str) -> (usize, f64) {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update(token.as_bytes());
    let d = h.finalize();
    let a = u64::from_le_bytes(d[0..8].try_into().unwrap());
    let b = u64::from_le_bytes(d[8..16].try_into().unwrap());
    ((a % TEXT_BINS as u64) as usize, 1.0 + (b >> 44) as f64 / (1u64 << 20) as f64)
}

/// Solves a small dense system by Gauss-Jordan with partial pivoting.
fn solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))?;
        if a[[piv, col]].abs() < 1e-12 {
            return None;
        }
        for k in 0..n {
            a.swap([col, k], [piv, k]);
        }
        b.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[[row, col]] / a[[col, col]];
                for k in 0..n {
                    a[[row, k]] -= f * a[[col, k]];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some(Array1::from_shape_fn(n, |i| b[i] / a[[i, i]]))
}

/// Unit direction d with <d, target - other> > 0 for every other, by perceptron.
fn separating_direction(target: [f64; STATS], others: &[[f64; STATS]]) -> Option<Array1<f64>> {
    let diffs: Vec<Array1<f64>> = others
        .iter()
        .map(|o| Array1::from_shape_fn(STATS, |i| target[i] - o[i]))
        .filter(|v| v.dot(v) > 0.0)
        .collect();
    if diffs.len() < others.len() {
        return None;
    }
    let unit = |v: &Array1<f64>| v / v.dot(v).sqrt();
    let mut d: Array1<f64> = diffs.iter().fold(Array1::zeros(STATS), |acc, v| acc + unit(v));
    for _ in 0..10_000 {
        let norm = d.dot(&d).sqrt();
        let worst = diffs
            .iter()
            .map(|v| (d.dot(v) / (norm.max(1e-300) * v.dot(v).sqrt()), v))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match worst {
            None => return None,
            Some((cos, _)) if cos > 1e-3 => return Some(&d / norm),
            Some((_, v)) => d = d + unit(v),
        }
    }
    None
}

impl StubEncoder {
    pub fn new(config: StubConfig) -> Result<Self, EncoderError> {
        if config.patch_side == 0 || config.image_side % config.patch_side != 0 {
            return Err(EncoderError::Stub(format!(
                "image side {} is not a multiple of patch side {}",
                config.image_side, config.patch_side
            )));
        }
        if config.dim < STATS + 1 {
            return Err(EncoderError::Stub(format!("dim must exceed {STATS}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let image_proj = Array2::from_shape_fn((d, STATS), |_| rng.random_range(-1.0..1.0));
        let mut text_proj = Array2::from_shape_fn((d, TEXT_BINS), |_| rng.random_range(-1.0..1.0));

        // P = I - W (W^T W)^-1 W^T removes image-space components.
        let gram = image_proj.t().dot(&image_proj);
        let dual = |v: Array1<f64>| -> Result<Array1<f64>, EncoderError> {
            let c = solve(gram.clone(), v).ok_or_else(|| EncoderError::Stub("singular image projection".into()))?;
            Ok(image_proj.dot(&c))
        };
        for mut col in text_proj.axis_iter_mut(Axis(1)) {
            let inside = dual(image_proj.t().dot(&col))?;
            col -= &inside;
        }

        let class_tokens: Vec<String> =
            config.classes.iter().map(|(n, _)| tokens(n).collect::<Vec<_>>().join("_")).collect();
        let salt = Self::find_salt(config.seed, &class_tokens)?;
        let all_stats: Vec<[f64; STATS]> = config.classes.iter().map(|(_, c)| color_stats(*c)).collect();
        for (i, token) in class_tokens.iter().enumerate() {
            let others: Vec<[f64; STATS]> = all_stats
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| *s)
                .chain(config.contrast_colors.iter().map(|c| color_stats(*c)))
                .collect();
            let dir = separating_direction(all_stats[i], &others).ok_or_else(|| {
                EncoderError::Stub(format!("color of class `{token}` is not separable from the other colors"))
            })?;
            let u = dual(dir)? * config.class_gain;
            let (bin, _) = token_slot(salt, token);
            text_proj.column_mut(bin).assign(&u);
        }
        Ok(Self { config, image_proj, text_proj, salt })
    }

    /// First salt at or after `seed` whose bins keep class tokens apart from
    /// each other and from the template words.
    fn find_salt(seed: u64, class_tokens: &[String]) -> Result<u64, EncoderError> {
        'outer: for salt in seed..seed.wrapping_add(100_000) {
            let mut used: Vec<usize> = TEMPLATE_WORDS.iter().map(|w| token_slot(salt, w).0).collect();
            for t in class_tokens {
                let bin = token_slot(salt, t).0;
                if used.contains(&bin) {
                    continue 'outer;
                }
                used.push(bin);
            }
            return Ok(salt);
        }
        Err(EncoderError::Stub("no collision-free hash salt for the class tokens".into()))
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    pub fn image_projection(&self) -> &Array2<f64> {
        &self.image_proj
    }

    pub fn text_projection(&self) -> &Array2<f64> {
        &self.text_proj
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    /// The weighted 64-bin token bag of a prompt.
    pub fn token_bag(&self, prompt: &str) -> Array1<f64> {
        let mut bag = Array1::zeros(TEXT_BINS);
        for t in tokens(prompt) {
            let (bin, w) = token_slot(self.salt, &t);
            bag[bin] += w;
        }
        bag
    }
}

impl Encoder for StubEncoder {
    fn info(&self) -> EncoderInfo {
        let grid = (self.config.image_side / self.config.patch_side) as usize;
        EncoderInfo {
            name: "stub".into(),
            image_dim: self.config.dim,
            text_dim: self.config.dim,
            num_patches: grid * grid,
            image_side: self.config.image_side,
            patch_side: self.config.patch_side,
            frozen: true,
        }
    }

    fn encode_image(&self, image: &RgbImage, source: ImageSource) -> Result<PatchFeatures, EncoderError> {
        let side = self.config.image_side;
        let img = fit_square(image, side, FilterType::Triangle)?;
        let p = self.config.patch_side;
        let grid = side / p;
        let mut stats = Array2::zeros(((grid * grid) as usize, STATS));
        for gy in 0..grid {
            for gx in 0..grid {
                let s = patch_stats(&img, gx * p, gy * p, p);
                let row = (gy * grid + gx) as usize;
                for (k, v) in s.iter().enumerate() {
                    stats[[row, k]] = *v;
                }
            }
        }
        Ok(PatchFeatures { matrix: stats.dot(&self.image_proj.t()), source })
    }

    fn encode_text(&self, prompt: &str) -> Result<TextFeature, EncoderError> {
        if prompt.trim().is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        Ok(TextFeature { vector: self.text_proj.dot(&self.token_bag(prompt)) })
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"stub");
        h.update(self.salt.to_le_bytes());
        for v in self.image_proj.iter().chain(self.text_proj.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
