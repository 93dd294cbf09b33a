//! Synthetic before/after meals with analytically known weights.
//!
//! Every food item is an axis-aligned filled ellipse in a class color on a
//! plain background. Weight is `density * pixel_area`; the after image shrinks
//! each ellipse's area by a drawn consumed fraction about the same center.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{manifest, DatasetError};
use crate::data::{FoodItem, ImageRef, Sample, StructureTag};
use crate::encoder::StubConfig;

const PLACEMENT_RETRIES: usize = 100;
/// Gap kept between item bounding boxes, in pixels.
const PLACEMENT_GAP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    pub color: [u8; 3],
    /// Grams per pixel.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: u32,
    pub classes: Vec<SyntheticClass>,
    /// Inclusive item count range per image.
    pub items_per_image: (usize, usize),
    pub consumed_fraction_range: (f64, f64),
    /// Inclusive semi-axis range in pixels.
    pub semi_axis_range: (f64, f64),
    pub background: [u8; 3],
    pub seed: u64,
    pub dataset_tag: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 336,
            classes: default_classes(),
            items_per_image: (1, 3),
            consumed_fraction_range: (0.0, 1.0),
            semi_axis_range: (12.0, 56.0),
            background: [235, 235, 230],
            seed: 0,
            dataset_tag: "synthetic".into(),
        }
    }
}

pub fn default_classes() -> Vec<SyntheticClass> {
    let c = |name: &str, color, density| SyntheticClass { name: name.into(), color, density };
    vec![
        c("red_blob", [220, 50, 47], 0.10),
        c("green_blob", [60, 170, 60], 0.06),
        c("blue_blob", [40, 90, 210], 0.14),
        c("yellow_blob", [230, 200, 40], 0.08),
    ]
}

impl SyntheticSpec {
    /// Stub encoder settings whose class tokens pick out this spec's colors.
    pub fn stub_config(&self) -> StubConfig {
        StubConfig {
            classes: self.classes.iter().map(|c| (c.name.clone(), c.color)).collect(),
            contrast_colors: vec![self.background],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: String| Err(DatasetError::Spec(m));
        if self.image_size < 16 {
            return err(format!("image_size {} too small", self.image_size));
        }
        if self.classes.is_empty() {
            return err("no classes".into());
        }
        for (i, a) in self.classes.iter().enumerate() {
            if a.name.trim().is_empty() || a.name.contains(char::is_whitespace) {
                return err(format!("class name `{}` must be a single non-empty token", a.name));
            }
            if !(a.density > 0.0 && a.density.is_finite()) {
                return err(format!("class `{}` density must be > 0", a.name));
            }
            if a.color == self.background {
                return err(format!("class `{}` color equals the background", a.name));
            }
            for b in &self.classes[i + 1..] {
                if a.color == b.color {
                    return err(format!("classes `{}` and `{}` share a color", a.name, b.name));
                }
                if a.name == b.name {
                    return err(format!("duplicate class `{}`", a.name));
                }
            }
        }
        let (lo, hi) = self.items_per_image;
        if lo == 0 || lo > hi {
            return err(format!("bad items_per_image range ({lo}, {hi})"));
        }
        let (f0, f1) = self.consumed_fraction_range;
        if !(0.0..=1.0).contains(&f0) || !(0.0..=1.0).contains(&f1) || f0 > f1 {
            return err(format!("consumed_fraction_range ({f0}, {f1}) not within [0, 1]"));
        }
        let (a0, a1) = self.semi_axis_range;
        if !(a0 >= 1.0 && a0 <= a1 && 2.0 * a1 + 2.0 < self.image_size as f64) {
            return err(format!("semi_axis_range ({a0}, {a1}) does not fit the image"));
        }
        Ok(())
    }
}

/// Geometry and ground truth of one generated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseTruth {
    pub class: String,
    pub center: (f64, f64),
    /// Semi-axes (x, y) before consumption.
    pub radii: (f64, f64),
    /// Semi-axes after consumption, `None` when fully eaten.
    pub after_radii: Option<(f64, f64)>,
    pub consumed_fraction: f64,
    pub before_pixels: u64,
    pub after_pixels: u64,
    /// Pixel bounding box of the before mask: (x0, y0, x1, y1), inclusive.
    pub bbox: (u32, u32, u32, u32),
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub truth: Vec<EllipseTruth>,
}

fn inside(px: u32, py: u32, center: (f64, f64), radii: (f64, f64)) -> bool {
    let dx = (px as f64 + 0.5 - center.0) / radii.0;
    let dy = (py as f64 + 0.5 - center.1) / radii.1;
    dx * dx + dy * dy <= 1.0
}

/// Paints an ellipse and returns the number of pixels it covers.
fn paint(img: &mut RgbImage, center: (f64, f64), radii: (f64, f64), color: [u8; 3]) -> (u64, (u32, u32, u32, u32)) {
    let (w, h) = img.dimensions();
    let x0 = (center.0 - radii.0 - 1.0).floor().max(0.0) as u32;
    let x1 = ((center.0 + radii.0 + 1.0).ceil() as u32).min(w - 1);
    let y0 = (center.1 - radii.1 - 1.0).floor().max(0.0) as u32;
    let y1 = ((center.1 + radii.1 + 1.0).ceil() as u32).min(h - 1);
    let mut count = 0;
    let mut bbox = (u32::MAX, u32::MAX, 0, 0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(x, y, center, radii) {
                img.put_pixel(x, y, Rgb(color));
                count += 1;
                bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
            }
        }
    }
    (count, bbox)
}

fn eccentricity(radii: (f64, f64)) -> f64 {
    let (major, minor) = if radii.0 >= radii.1 { radii } else { (radii.1, radii.0) };
    (1.0 - (minor / major).powi(2)).sqrt()
}

/// Per-sample RNG stream derived from (seed, index) only.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample, DatasetError> {
    let mut rng = sample_rng(spec.seed, index as u64);
    let size = spec.image_size;
    let (lo, hi) = spec.items_per_image;
    let k = rng.random_range(lo..=hi).min(spec.classes.len());
    let mut class_idx: Vec<usize> = (0..spec.classes.len()).collect();
    class_idx.shuffle(&mut rng);
    class_idx.truncate(k);

    let mut placed: Vec<((f64, f64), (f64, f64))> = Vec::with_capacity(k);
    let (a0, a1) = spec.semi_axis_range;
    for _ in 0..k {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let rx = rng.random_range(a0..=a1);
            let ry = rng.random_range(a0..=a1);
            let cx = rng.random_range(rx + 1.0..=size as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..=size as f64 - ry - 1.0);
            let clear = placed.iter().all(|&((ox, oy), (orx, ory))| {
                (cx - ox).abs() >= rx + orx + PLACEMENT_GAP || (cy - oy).abs() >= ry + ory + PLACEMENT_GAP
            });
            if clear {
                ok = Some(((cx, cy), (rx, ry)));
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                return Err(DatasetError::Spec(format!(
                    "sample {index}: could not place {k} ellipses without overlap after {PLACEMENT_RETRIES} retries"
                )))
            }
        }
    }

    let (f0, f1) = spec.consumed_fraction_range;
    let mut before = RgbImage::from_pixel(size, size, Rgb(spec.background));
    let mut after = before.clone();
    let mut items = Vec::with_capacity(k);
    let mut truth = Vec::with_capacity(k);
    for (&ci, &(center, radii)) in class_idx.iter().zip(&placed) {
        let class = &spec.classes[ci];
        let f = if f0 == f1 { f0 } else { rng.random_range(f0..=f1) };
        let (before_pixels, bbox) = paint(&mut before, center, radii, class.color);
        let scale = (1.0 - f).sqrt();
        let after_radii = (f < 1.0).then(|| (radii.0 * scale, radii.1 * scale));
        let after_pixels = match after_radii {
            Some(r) if r.0 > 0.0 && r.1 > 0.0 => paint(&mut after, center, r, class.color).0,
            _ => 0,
        };
        let structure =
            if eccentricity(radii) < 0.5 { StructureTag::Solid } else { StructureTag::AmorphousMixed };
        let wb = class.density * before_pixels as f64;
        let wa = class.density * after_pixels as f64;
        items.push(FoodItem::new(class.name.clone(), wb, Some(wa), structure).expect("generated weights valid"));
        truth.push(EllipseTruth {
            class: class.name.clone(),
            center,
            radii,
            after_radii,
            consumed_fraction: f,
            before_pixels,
            after_pixels,
            bbox,
        });
    }
    let sample = Sample::new(
        format!("syn_{index:06}"),
        ImageRef::Memory(Arc::new(before)),
        Some(ImageRef::Memory(Arc::new(after))),
        items,
        spec.dataset_tag.clone(),
    )
    .expect("generated sample valid");
    Ok(SyntheticSample { sample, truth })
}

/// Generates `count` samples. Output depends only on the spec (incl. seed).
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Vec<SyntheticSample>, DatasetError> {
    spec.validate()?;
    (0..count).into_par_iter().map(|i| generate_one(spec, i)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    sample_id: String,
    items: Vec<EllipseTruth>,
}

/// Files written by [`write_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticOutput {
    pub manifest: PathBuf,
    pub truth: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Writes PNG images, a manifest and a geometry sidecar (`truth.jsonl`).
pub fn write_synthetic(samples: &[SyntheticSample], dir: &Path) -> Result<SyntheticOutput, DatasetError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| DatasetError::Io { path: p, source: e }
    };
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io(&img_dir))?;
    let written: Vec<(Sample, Vec<PathBuf>)> = samples
        .par_iter()
        .map(|s| {
            let id = s.sample.sample_id();
            let save = |img: &ImageRef, suffix: &str| -> Result<PathBuf, DatasetError> {
                let rel = PathBuf::from("images").join(format!("{id}_{suffix}.png"));
                let full = dir.join(&rel);
                img.load()
                    .and_then(|im| im.save(&full))
                    .map_err(|e| DatasetError::Image { path: full.clone(), message: e.to_string() })?;
                Ok(rel)
            };
            let before = save(s.sample.before_image(), "before")?;
            let after = s.sample.after_image().map(|a| save(a, "after")).transpose()?;
            let mut files = vec![dir.join(&before)];
            files.extend(after.as_ref().map(|a| dir.join(a)));
            let sample = Sample::new(
                id,
                ImageRef::Path(before),
                after.map(ImageRef::Path),
                s.sample.items().to_vec(),
                s.sample.dataset_tag(),
            )
            .expect("rewritten sample valid");
            Ok((sample, files))
        })
        .collect::<Result<_, DatasetError>>()?;

    let manifest_path = dir.join("manifest.jsonl");
    manifest::save_manifest(&manifest_path, written.iter().map(|(s, _)| s))?;
    let truth_path = dir.join("truth.jsonl");
    let mut truth = String::new();
    for s in samples {
        let rec = TruthRecord { sample_id: s.sample.sample_id().to_string(), items: s.truth.clone() };
        truth.push_str(&serde_json::to_string(&rec).expect("truth serializes"));
        truth.push('\n');
    }
    fs::write(&truth_path, truth).map_err(io(&truth_path))?;
    Ok(SyntheticOutput {
        manifest: manifest_path,
        truth: truth_path,
        images: written.into_iter().flat_map(|(_, f)| f).collect(),
    })
}

/// Reads a `truth.jsonl` sidecar into (sample_id, items) pairs.
pub fn load_truth(path: &Path) -> Result<Vec<(String, Vec<EllipseTruth>)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: TruthRecord =
                serde_json::from_str(l).map_err(|e| DatasetError::Parse { line: i + 1, message: e.to_string() })?;
            Ok((r.sample_id, r.items))
        })
        .collect()
}
