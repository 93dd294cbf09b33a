//! Attention heatmap overlays and distribution plots.
//!
//! Plots are plain SVG written by hand so identical inputs give identical bytes.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StructureTag;
use crate::evaluation::{ItemPrediction, Stratum};

#[derive(Debug, Error, PartialEq)]
pub enum VizError {
    #[error("nothing to plot")]
    EmptyReport,
    #[error("bad grid: {0}")]
    Grid(String),
}

/// Bilinear sample of `grid` at continuous patch coordinates (cell centers at i + 0.5).
fn bilinear(grid: &Array2<f64>, gx: f64, gy: f64) -> f64 {
    let (rows, cols) = grid.dim();
    let x = (gx - 0.5).clamp(0.0, (cols - 1) as f64);
    let y = (gy - 0.5).clamp(0.0, (rows - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
    let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Upsamples an attention grid to `width x height`, normalized by its own maximum.
pub fn upsample(grid: &Array2<f64>, width: u32, height: u32) -> Result<Array2<f64>, VizError> {
    if grid.is_empty() {
        return Err(VizError::Grid("empty grid".into()));
    }
    let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (rows, cols) = grid.dim();
    Ok(Array2::from_shape_fn((height as usize, width as usize), |(y, x)| {
        let gx = (x as f64 + 0.5) * cols as f64 / width as f64;
        let gy = (y as f64 + 0.5) * rows as f64 / height as f64;
        bilinear(grid, gx, gy) * scale
    }))
}

/// Viridis heat over the image: `out = (1 - alpha) * image + alpha * color(weight)`.
pub fn overlay(image: &RgbImage, grid: &Array2<f64>, alpha: f64) -> Result<RgbImage, VizError> {
    let (w, h) = image.dimensions();
    let heat = upsample(grid, w, h)?;
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let c = colorous::VIRIDIS.eval_continuous(heat[[y as usize, x as usize]].clamp(0.0, 1.0));
        let base = image.get_pixel(x, y).0;
        let mix = |b: u8, c: u8| ((1.0 - alpha) * b as f64 + alpha * c as f64).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(base[0], c.r), mix(base[1], c.g), mix(base[2], c.b)])
    }))
}

/// Attention mass on patches that overlap an inclusive pixel bounding box.
pub fn mass_in_bbox(grid: &Array2<f64>, patch_side: u32, bbox: (u32, u32, u32, u32)) -> f64 {
    let (x0, y0, x1, y1) = bbox;
    let mut mass = 0.0;
    for ((r, c), v) in grid.indexed_iter() {
        let (px0, py0) = (c as u32 * patch_side, r as u32 * patch_side);
        let (px1, py1) = (px0 + patch_side - 1, py0 + patch_side - 1);
        if px0 <= x1 && x0 <= px1 && py0 <= y1 && y0 <= py1 {
            mass += v;
        }
    }
    mass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Shared-edge histograms of predictions and targets.
pub fn histogram(items: &[ItemPrediction], bins: usize) -> Result<Histogram, VizError> {
    if items.is_empty() || bins == 0 {
        return Err(VizError::EmptyReport);
    }
    let (lo, hi) = range(items.iter().flat_map(|i| [i.prediction, i.target]));
    let edges = (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
    let mut predicted = vec![0; bins];
    let mut truth = vec![0; bins];
    for it in items {
        predicted[bin_of(it.prediction, lo, hi, bins)] += 1;
        truth[bin_of(it.target, lo, hi, bins)] += 1;
    }
    Ok(Histogram { edges, predicted, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDensity {
    /// Shared axis range for truth (x) and prediction (y).
    pub range: (f64, f64),
    pub bins: usize,
    /// `counts[y][x]`, pooled over strata.
    pub counts: Vec<Vec<usize>>,
    /// Stratum name with its item count, pooled last.
    pub legend: Vec<(String, usize)>,
    /// Items whose prediction equals the target exactly.
    pub on_diagonal: usize,
}

pub fn joint_density(items: &[ItemPrediction], bins: usize) -> Result<JointDensity, VizError> {
    if items.is_empty() || bins == 0 {
        return Err(VizError::EmptyReport);
    }
    let (lo, hi) = range(items.iter().flat_map(|i| [i.prediction, i.target]));
    let mut counts = vec![vec![0; bins]; bins];
    for it in items {
        counts[bin_of(it.prediction, lo, hi, bins)][bin_of(it.target, lo, hi, bins)] += 1;
    }
    let mut legend: Vec<(String, usize)> = StructureTag::ALL
        .iter()
        .map(|t| (Stratum::from(*t).to_string(), items.iter().filter(|i| i.structure == *t).count()))
        .filter(|(_, n)| *n > 0)
        .collect();
    legend.push(("all".into(), items.len()));
    let on_diagonal = items.iter().filter(|i| i.prediction == i.target).count();
    Ok(JointDensity { range: (lo, hi), bins, counts, legend, on_diagonal })
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="monospace" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, title);
    let _ = writeln!(
        s,
        r#"<path d="M{MARGIN} {MARGIN} V{} H{}" stroke="black" fill="none"/>"#,
        H - MARGIN,
        W - MARGIN
    );
    s
}

fn axis_labels(s: &mut String, lo: f64, hi: f64, x_label: &str, y_label: &str) {
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}" text-anchor="middle">{lo:.1}</text>"#, H - MARGIN + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{hi:.1}</text>"#, W - MARGIN, H - MARGIN + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let mut s = svg_open(title);
    let bins = h.predicted.len();
    let peak = h.predicted.iter().chain(&h.truth).copied().max().unwrap_or(1).max(1) as f64;
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bw = plot_w / bins as f64;
    for (series, counts, color, offset) in [("truth", &h.truth, "#3b528b", 0.0), ("predicted", &h.predicted, "#5ec962", 0.5)] {
        for (k, &c) in counts.iter().enumerate() {
            let bh = plot_h * c as f64 / peak;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.8"><title>{series} {c}</title></rect>"#,
                MARGIN + bw * (k as f64 + offset),
                H - MARGIN - bh,
                bw / 2.0,
                bh
            );
        }
    }
    let n: usize = h.truth.iter().sum();
    let _ = writeln!(s, r##"<rect x="{}" y="40" width="10" height="10" fill="#3b528b"/><text x="{}" y="50">ground truth (n={n})</text>"##, W - 220.0, W - 205.0);
    let _ = writeln!(s, r##"<rect x="{}" y="56" width="10" height="10" fill="#5ec962"/><text x="{}" y="66">predicted (n={n})</text>"##, W - 220.0, W - 205.0);
    axis_labels(&mut s, h.edges[0], h.edges[bins], "weight (g)", "count");
    s.push_str("</svg>\n");
    s
}

fn stratum_color(t: StructureTag) -> &'static str {
    match t {
        StructureTag::Solid => "#440154",
        StructureTag::AmorphousMixed => "#21918c",
        StructureTag::Unknown => "#fde725",
    }
}

pub fn joint_svg(items: &[ItemPrediction], density: &JointDensity, title: &str) -> String {
    let mut s = svg_open(title);
    let (lo, hi) = density.range;
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + plot_w * (v - lo) / (hi - lo);
    let py = |v: f64| H - MARGIN - plot_h * (v - lo) / (hi - lo);
    let peak = density.counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let (cw, ch) = (plot_w / density.bins as f64, plot_h / density.bins as f64);
    for (yb, row) in density.counts.iter().enumerate() {
        for (xb, &c) in row.iter().enumerate().filter(|(_, c)| **c > 0) {
            let col = colorous::GREYS.eval_continuous(0.15 + 0.6 * c as f64 / peak);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="{col:x}" fill-opacity="0.6"/>"#,
                MARGIN + cw * xb as f64,
                H - MARGIN - ch * (yb + 1) as f64,
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="red" stroke-dasharray="4 3"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for it in items {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            px(it.target),
            py(it.prediction),
            stratum_color(it.structure)
        );
    }
    for (k, (name, n)) in density.legend.iter().enumerate() {
        let y = 40.0 + 16.0 * k as f64;
        let color = StructureTag::ALL
            .iter()
            .find(|t| Stratum::from(**t).to_string() == *name)
            .map_or("black", |t| stratum_color(*t));
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="4" fill="{color}"/><text x="{}" y="{}">{name} (n={n})</text>"#,
            MARGIN + 12.0,
            y - 4.0,
            MARGIN + 22.0,
            y
        );
    }
    axis_labels(&mut s, lo, hi, "ground truth (g)", "predicted (g)");
    s.push_str("</svg>\n");
    s
}
