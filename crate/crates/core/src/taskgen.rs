//! Synthetic structured-prediction tasks: procedurally textured shape
//! scenes with exact label and depth ground truth, the three task pairings
//! built from them, and the evaluation metric suite.

use std::fmt;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::netpbm;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Model-unit depth bounds used by the inverse-depth network encoding.
pub const DEPTH_NEAR: f32 = 0.5;
pub const DEPTH_FAR: f32 = 10.0;

/// Distinct base colors per class; index 0 is the background. The textured
/// renderer only modulates brightness around these, so nearest-base-color
/// classification inverts a clean render.
pub const CLASS_COLORS: [[f32; 3]; 5] = [
    [0.10, 0.10, 0.12],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    MaskToImage,
    Segmentation,
    Depth,
}

impl TaskKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            TaskKind::MaskToImage => "mask_to_image",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "mask_to_image" => Ok(TaskKind::MaskToImage),
            "segmentation" => Ok(TaskKind::Segmentation),
            "depth" => Ok(TaskKind::Depth),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected mask_to_image, segmentation, depth)"
            ))),
        }
    }

    /// Conditional-input channels seen by the networks.
    pub fn x_channels(&self) -> usize {
        3
    }

    /// Target channels for `class_count` classes.
    pub fn y_channels(&self, class_count: usize) -> usize {
        match self {
            TaskKind::MaskToImage => 3,
            TaskKind::Segmentation => class_count,
            TaskKind::Depth => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// One conditional sample: x conditions the generator, y is the target.
/// Values are already scaled to [-1, 1].
#[derive(Clone)]
pub struct SamplePair {
    pub x: Tensor,
    pub y: Tensor,
    pub task: TaskKind,
    pub class_count: usize,
    pub id: u64,
}

/// Scene recipe: how many shapes of which kinds on what canvas.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub canvas: usize,
    pub shape_count: (usize, usize),
    pub class_count: usize,
    pub depth_range: (f32, f32),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 64,
            shape_count: (2, 5),
            class_count: 5,
            depth_range: (DEPTH_NEAR, DEPTH_FAR),
            seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.canvas < 16 {
            return Err(Error::Config(format!(
                "canvas {} too small for shape placement",
                self.canvas
            )));
        }
        if self.class_count < 2 || self.class_count > CLASS_COLORS.len() {
            return Err(Error::Config(format!(
                "class_count {} outside [2, {}]",
                self.class_count,
                CLASS_COLORS.len()
            )));
        }
        if self.shape_count.0 > self.shape_count.1 {
            return Err(Error::Config("shape_count min exceeds max".into()));
        }
        if self.depth_range.0 < DEPTH_NEAR || self.depth_range.1 > DEPTH_FAR {
            return Err(Error::Config(format!(
                "depth_range {:?} outside [{DEPTH_NEAR}, {DEPTH_FAR}]",
                self.depth_range
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ShapeKind {
    Rectangle { cx: f32, cy: f32, hw: f32, hh: f32 },
    Ellipse { cx: f32, cy: f32, a: f32, b: f32 },
    Triangle { p0: (f32, f32), p1: (f32, f32), p2: (f32, f32) },
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub depth: f32,
}

impl Shape {
    fn covers(&self, x: f32, y: f32) -> bool {
        match self.kind {
            ShapeKind::Rectangle { cx, cy, hw, hh } => {
                (x - cx).abs() <= hw && (y - cy).abs() <= hh
            }
            ShapeKind::Ellipse { cx, cy, a, b } => {
                let dx = (x - cx) / a;
                let dy = (y - cy) / b;
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle { p0, p1, p2 } => {
                let sign = |a: (f32, f32), b: (f32, f32), c: (f32, f32)| {
                    (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
                };
                let d1 = sign((x, y), p0, p1);
                let d2 = sign((x, y), p1, p2);
                let d3 = sign((x, y), p2, p0);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

fn draw_shape(spec: &SceneSpec, rng: &mut Rng) -> Shape {
    // A one-pixel margin keeps every shape strictly inside the canvas, so
    // border pixels always stay background.
    let margin = 1.0f32;
    let side = spec.canvas as f32;
    let min_r = side * 0.08;
    let max_r = side * 0.24;
    let class = rng.gen_range(1..spec.class_count) as u8;
    let depth = rng.gen_range(spec.depth_range.0..spec.depth_range.1);
    let kind = match rng.gen_range(0u8..3) {
        0 => {
            let hw = rng.gen_range(min_r..max_r);
            let hh = rng.gen_range(min_r..max_r);
            let cx = rng.gen_range(hw + margin..side - hw - margin);
            let cy = rng.gen_range(hh + margin..side - hh - margin);
            ShapeKind::Rectangle { cx, cy, hw, hh }
        }
        1 => {
            let a = rng.gen_range(min_r..max_r);
            let b = rng.gen_range(min_r..max_r);
            let cx = rng.gen_range(a + margin..side - a - margin);
            let cy = rng.gen_range(b + margin..side - b - margin);
            ShapeKind::Ellipse { cx, cy, a, b }
        }
        _ => {
            let r = rng.gen_range(min_r..max_r);
            let cx = rng.gen_range(r + margin..side - r - margin);
            let cy = rng.gen_range(r + margin..side - r - margin);
            let mut pt = |base: f32| {
                let angle = base + rng.gen_range(-0.4f32..0.4);
                (cx + r * angle.cos(), cy + r * angle.sin())
            };
            ShapeKind::Triangle {
                p0: pt(0.0),
                p1: pt(2.094),
                p2: pt(4.189),
            }
        }
    };
    Shape { kind, class, depth }
}

/// Deterministic scene for sample `id` under `spec`.
pub fn scene_shapes(spec: &SceneSpec, id: u64) -> Vec<Shape> {
    let mut rng = stream(spec.seed, &format!("scene.{id}"));
    let count = rng.gen_range(spec.shape_count.0..=spec.shape_count.1);
    (0..count).map(|_| draw_shape(spec, &mut rng)).collect()
}

/// Per-pixel class labels and depths; nearer shapes occlude farther ones,
/// uncovered pixels get the background class at the far depth.
pub fn rasterize(shapes: &[Shape], canvas: usize, far_depth: f32) -> (Vec<u8>, Vec<f32>) {
    let mut labels = vec![0u8; canvas * canvas];
    let mut depths = vec![far_depth; canvas * canvas];
    for py in 0..canvas {
        for px in 0..canvas {
            let (fx, fy) = (px as f32 + 0.5, py as f32 + 0.5);
            let idx = py * canvas + px;
            for s in shapes {
                if s.depth < depths[idx] && s.covers(fx, fy) {
                    depths[idx] = s.depth;
                    labels[idx] = s.class;
                }
            }
        }
    }
    (labels, depths)
}

/// Brightness modulation of the class texture at pixel (x, y).
fn texture_factor(class: u8, x: usize, y: usize) -> f32 {
    const AMP: f32 = 0.25;
    let (xf, yf) = (x as f32, y as f32);
    match class {
        0 => 1.0,
        1 => 1.0 + AMP * (yf * std::f32::consts::TAU / 6.0).sin(),
        2 => {
            if (x / 4 + y / 4) % 2 == 0 {
                1.0 + AMP
            } else {
                1.0 - AMP
            }
        }
        3 => 1.0 + AMP * ((xf + yf) * std::f32::consts::TAU / 8.0).sin(),
        _ => {
            1.0 + AMP
                * (xf * std::f32::consts::TAU / 5.0).sin()
                * (yf * std::f32::consts::TAU / 5.0).sin()
        }
    }
}

/// Flat-color class mask in [0, 1] RGB.
pub fn render_mask(labels: &[u8], canvas: usize) -> Vec<f32> {
    let mut rgb = vec![0.0f32; 3 * canvas * canvas];
    for (i, &l) in labels.iter().enumerate() {
        let c = CLASS_COLORS[l as usize];
        for ch in 0..3 {
            rgb[ch * canvas * canvas + i] = c[ch];
        }
    }
    rgb
}

/// Textured render in [0, 1] RGB: base color x texture factor + noise.
pub fn render_textured(labels: &[u8], canvas: usize, rng: &mut Rng) -> Vec<f32> {
    let mut rgb = vec![0.0f32; 3 * canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            let i = y * canvas + x;
            let class = labels[i];
            let factor = texture_factor(class, x, y);
            let noise: f32 = rng.gen_range(-0.03f32..0.03);
            let base = CLASS_COLORS[class as usize];
            for ch in 0..3 {
                rgb[ch * canvas * canvas + i] = (base[ch] * factor + noise).clamp(0.0, 1.0);
            }
        }
    }
    rgb
}

fn to_signed(unit: &[f32]) -> Vec<f32> {
    unit.iter().map(|v| v * 2.0 - 1.0).collect()
}

/// Map a depth to the [-1, 1] inverse-depth network encoding.
pub fn encode_depth(d: f32) -> f32 {
    let lo = 2.0 / DEPTH_FAR;
    let hi = 2.0 / DEPTH_NEAR;
    let inv = 2.0 / d.clamp(DEPTH_NEAR, DEPTH_FAR);
    2.0 * (inv - lo) / (hi - lo) - 1.0
}

/// Invert `encode_depth`; any real input maps to a strictly positive depth.
pub fn decode_depth(enc: f32) -> f32 {
    let lo = 2.0 / DEPTH_FAR;
    let hi = 2.0 / DEPTH_NEAR;
    let inv = (lo + (enc.clamp(-1.0, 1.0) + 1.0) / 2.0 * (hi - lo)).max(lo);
    2.0 / inv
}

/// One-hot labels as +1 (hot) / -1 (cold) channels.
fn one_hot_signed(labels: &[u8], canvas: usize, class_count: usize) -> Vec<f32> {
    let plane = canvas * canvas;
    let mut out = vec![-1.0f32; class_count * plane];
    for (i, &l) in labels.iter().enumerate() {
        out[l as usize * plane + i] = 1.0;
    }
    out
}

/// Build the deterministic sample `id` for `task`.
pub fn generate_sample(spec: &SceneSpec, id: u64, task: TaskKind) -> Result<SamplePair> {
    spec.validate()?;
    let canvas = spec.canvas;
    let shapes = scene_shapes(spec, id);
    let (labels, depths) = rasterize(&shapes, canvas, spec.depth_range.1);
    let mut tex_rng = stream(spec.seed, &format!("texture.{id}"));
    let textured = to_signed(&render_textured(&labels, canvas, &mut tex_rng));
    let dims3 = [1, 3, canvas, canvas];

    let (x, y) = match task {
        TaskKind::MaskToImage => {
            let mask = to_signed(&render_mask(&labels, canvas));
            (
                Tensor::from_vec(mask, dims3)?,
                Tensor::from_vec(textured, dims3)?,
            )
        }
        TaskKind::Segmentation => {
            let hot = one_hot_signed(&labels, canvas, spec.class_count);
            (
                Tensor::from_vec(textured, dims3)?,
                Tensor::from_vec(hot, [1, spec.class_count, canvas, canvas])?,
            )
        }
        TaskKind::Depth => {
            let enc: Vec<f32> = depths.iter().map(|&d| encode_depth(d)).collect();
            (
                Tensor::from_vec(textured, dims3)?,
                Tensor::from_vec(enc, [1, 1, canvas, canvas])?,
            )
        }
    };
    Ok(SamplePair {
        x,
        y,
        task,
        class_count: spec.class_count,
        id,
    })
}

/// The first `n` samples of the deterministic stream.
pub fn generate_dataset(spec: &SceneSpec, n: usize, task: TaskKind) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    (0..n as u64).map(|id| generate_sample(spec, id, task)).collect()
}

// Metrics

/// Per-class intersection-over-union averaged over the classes present in
/// either map; classes absent from both are excluded from the mean.
pub fn mean_iou(pred: &[u8], gt: &[u8], class_count: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "mean_iou: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut intersection = vec![0u64; class_count];
    let mut union = vec![0u64; class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= class_count || g >= class_count {
            return Err(Error::Data(format!(
                "mean_iou: label {} outside [0, {class_count})",
                p.max(g)
            )));
        }
        if p == g {
            intersection[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0f64;
    let mut present = 0usize;
    for c in 0..class_count {
        if union[c] > 0 {
            total += intersection[c] as f64 / union[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Ok(0.0);
    }
    Ok(total / present as f64)
}

pub fn pixel_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "pixel_accuracy: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let matching = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(matching as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
}

/// Relative error, RMS, and mean |log10| gap, in raw depth units. The
/// prediction is clamped to a 1e-3 floor before evaluation.
pub fn depth_metrics(pred: &[f32], gt: &[f32]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "depth_metrics: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    if gt.iter().any(|&g| g <= 0.0) {
        return Err(Error::Data("depth_metrics: non-positive ground truth".into()));
    }
    let n = pred.len() as f64;
    let mut rel = 0.0f64;
    let mut sq = 0.0f64;
    let mut log = 0.0f64;
    for (&p, &g) in pred.iter().zip(gt) {
        let p = f64::from(p.max(1e-3));
        let g = f64::from(g);
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        log += (p.log10() - g.log10()).abs();
    }
    Ok(DepthMetrics {
        rel: rel / n,
        rms: (sq / n).sqrt(),
        log10: log / n,
    })
}

/// Per-pixel argmax over channels; ties break toward the lowest class
/// index. Batched input yields N*H*W labels.
pub fn labels_from_logits(y: &Tensor, class_count: usize) -> Result<Vec<u8>> {
    let [n, c, h, w] = y.dims();
    if c != class_count {
        return Err(Error::Data(format!(
            "labels_from_logits: {c} channels for {class_count} classes"
        )));
    }
    let plane = h * w;
    let d = y.data_ref();
    let mut out = vec![0u8; n * plane];
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = d[s * c * plane + p];
            for ch in 1..c {
                let v = d[(s * c + ch) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[s * plane + p] = best as u8;
        }
    }
    Ok(out)
}

/// Invert a textured or flat render to labels by nearest class base color.
/// Input is a [-1, 1] RGB tensor.
pub fn classify_colors(rgb: &Tensor, class_count: usize) -> Result<Vec<u8>> {
    let [n, c, h, w] = rgb.dims();
    if c != 3 {
        return Err(Error::Data(format!("classify_colors: {c} channels, need 3")));
    }
    let plane = h * w;
    let d = rgb.data_ref();
    let mut out = vec![0u8; n * plane];
    for s in 0..n {
        for p in 0..plane {
            let px = [
                (d[(s * 3) * plane + p] + 1.0) / 2.0,
                (d[(s * 3 + 1) * plane + p] + 1.0) / 2.0,
                (d[(s * 3 + 2) * plane + p] + 1.0) / 2.0,
            ];
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for (cls, base) in CLASS_COLORS.iter().enumerate().take(class_count) {
                let dist: f32 = px
                    .iter()
                    .zip(base)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = cls;
                }
            }
            out[s * plane + p] = best as u8;
        }
    }
    Ok(out)
}

// Disk layout

fn quantize_u8(signed: &[f32]) -> Vec<u8> {
    signed
        .iter()
        .map(|&v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn dequantize(bytes: &[u8]) -> Vec<f32> {
    bytes
        .iter()
        .map(|&b| f32::from(b) / 255.0 * 2.0 - 1.0)
        .collect()
}

/// Channel-planar [-1,1] RGB -> interleaved bytes.
fn planar_to_interleaved(planar: &[f32], plane: usize) -> Vec<u8> {
    let q = quantize_u8(planar);
    let mut out = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            out[p * 3 + ch] = q[ch * plane + p];
        }
    }
    out
}

fn interleaved_to_planar(bytes: &[u8], plane: usize) -> Vec<f32> {
    let mut planar = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            planar[ch * plane + p] = bytes[p * 3 + ch];
        }
    }
    dequantize(&planar)
}

/// Write `pairs` under `<root>/<task>/<split>/` with a manifest line per
/// sample.
pub fn save_dataset(
    root: &Path,
    task: TaskKind,
    split: &str,
    seed: u64,
    pairs: &[SamplePair],
) -> Result<()> {
    let dir = root.join(task.dir_name()).join(split);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = String::new();
    for pair in pairs {
        let [_, _, h, w] = pair.x.dims();
        let plane = h * w;
        let x_path = dir.join(format!("{}_x.ppm", pair.id));
        netpbm::write_ppm(
            &x_path,
            w,
            h,
            &planar_to_interleaved(&pair.x.data_ref(), plane),
        )?;
        match task {
            TaskKind::MaskToImage => {
                let y_path = dir.join(format!("{}_y.ppm", pair.id));
                netpbm::write_ppm(
                    &y_path,
                    w,
                    h,
                    &planar_to_interleaved(&pair.y.data_ref(), plane),
                )?;
            }
            TaskKind::Segmentation => {
                // Stored as the flat class-color render; colors invert
                // exactly back to labels on load.
                let labels = labels_from_logits(&pair.y, pair.class_count)?;
                let mask = to_signed(&render_mask(&labels, w));
                let y_path = dir.join(format!("{}_y.ppm", pair.id));
                netpbm::write_ppm(&y_path, w, h, &planar_to_interleaved(&mask, plane))?;
            }
            TaskKind::Depth => {
                let y_path = dir.join(format!("{}_y.pgm", pair.id));
                let d = pair.y.data_ref();
                let units: Vec<u16> = d
                    .iter()
                    .map(|&enc| (decode_depth(enc) * 1000.0).round() as u16)
                    .collect();
                netpbm::write_pgm16(&y_path, w, h, &units)?;
            }
        }
        manifest.push_str(&format!("{} {} {}\n", pair.id, task.dir_name(), seed));
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Load a split previously written by `save_dataset`.
pub fn load_dataset(
    root: &Path,
    task: TaskKind,
    split: &str,
    class_count: usize,
) -> Result<Vec<SamplePair>> {
    let dir = root.join(task.dir_name()).join(split);
    let mpath = dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut pairs = Vec::new();
    for line in manifest.lines() {
        let mut fields = line.split_whitespace();
        let id: u64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad manifest line: {line}")))?;
        let (w, h, x_bytes) = netpbm::read_ppm(&dir.join(format!("{id}_x.ppm")))?;
        let plane = w * h;
        let x = Tensor::from_vec(interleaved_to_planar(&x_bytes, plane), [1, 3, h, w])?;
        let y = match task {
            TaskKind::MaskToImage => {
                let (_, _, y_bytes) = netpbm::read_ppm(&dir.join(format!("{id}_y.ppm")))?;
                Tensor::from_vec(interleaved_to_planar(&y_bytes, plane), [1, 3, h, w])?
            }
            TaskKind::Segmentation => {
                let (_, _, y_bytes) = netpbm::read_ppm(&dir.join(format!("{id}_y.ppm")))?;
                let rgb = Tensor::from_vec(interleaved_to_planar(&y_bytes, plane), [1, 3, h, w])?;
                let labels = classify_colors(&rgb, class_count)?;
                Tensor::from_vec(
                    one_hot_signed(&labels, w, class_count),
                    [1, class_count, h, w],
                )?
            }
            TaskKind::Depth => {
                let img = netpbm::read_pgm(&dir.join(format!("{id}_y.pgm")))?;
                let enc: Vec<f32> = img
                    .samples
                    .iter()
                    .map(|&u| encode_depth(f32::from(u) / 1000.0))
                    .collect();
                Tensor::from_vec(enc, [1, 1, h, w])?
            }
        };
        pairs.push(SamplePair {
            x,
            y,
            task,
            class_count,
            id,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", mpath.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_per_seed() {
        let spec = SceneSpec {
            seed: 7,
            canvas: 32,
            ..SceneSpec::default()
        };
        let a = generate_dataset(&spec, 5, TaskKind::Segmentation).unwrap();
        let b = generate_dataset(&spec, 5, TaskKind::Segmentation).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.x.to_vec(), pb.x.to_vec());
            assert_eq!(pa.y.to_vec(), pb.y.to_vec());
        }
    }

    #[test]
    fn empty_scene_is_background_at_far_depth() {
        let (labels, depths) = rasterize(&[], 8, DEPTH_FAR);
        assert!(labels.iter().all(|&l| l == 0));
        assert!(depths.iter().all(|&d| d == DEPTH_FAR));
    }

    #[test]
    fn occlusion_takes_nearer_shape() {
        // Two overlapping rectangles, hand-placed: near one at depth 2,
        // far one at depth 5.
        let near = Shape {
            kind: ShapeKind::Rectangle { cx: 8.0, cy: 8.0, hw: 4.0, hh: 4.0 },
            class: 1,
            depth: 2.0,
        };
        let far = Shape {
            kind: ShapeKind::Rectangle { cx: 11.0, cy: 8.0, hw: 4.0, hh: 4.0 },
            class: 2,
            depth: 5.0,
        };
        let (labels, depths) = rasterize(&[far, near], 16, DEPTH_FAR);
        // Painter's-algorithm oracle: overlap column x=8 row y=8 belongs to
        // both; nearer wins.
        let idx = 8 * 16 + 8;
        assert_eq!(labels[idx], 1);
        assert_eq!(depths[idx], 2.0);
        // A pixel only the far shape covers.
        let idx_far = 8 * 16 + 14;
        assert_eq!(labels[idx_far], 2);
        assert_eq!(depths[idx_far], 5.0);
        // Order of the shape list must not matter.
        let (labels2, depths2) = rasterize(&[near, far], 16, DEPTH_FAR);
        assert_eq!(labels, labels2);
        assert_eq!(depths, depths2);
    }

    #[test]
    fn shapes_stay_inside_canvas() {
        let spec = SceneSpec {
            seed: 3,
            canvas: 32,
            ..SceneSpec::default()
        };
        for id in 0..20 {
            let shapes = scene_shapes(&spec, id);
            let (labels, _) = rasterize(&shapes, 32, DEPTH_FAR);
            for x in 0..32 {
                assert_eq!(labels[x], 0, "top edge touched at {x}");
                assert_eq!(labels[31 * 32 + x], 0, "bottom edge touched at {x}");
            }
        }
    }

    #[test]
    fn mean_iou_pinned_cases() {
        let same = vec![1u8, 0, 1, 0];
        assert_eq!(mean_iou(&same, &same, 2).unwrap(), 1.0);

        // 2x2 map: pred class-1 at (0,0),(0,1); gt class-1 at (0,1),(1,1).
        let pred = vec![1u8, 1, 0, 0];
        let gt = vec![0u8, 1, 0, 1];
        let iou = mean_iou(&pred, &gt, 2).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12, "{iou}");

        // Disjoint single-class masks: class 1 IoU is 0.
        let pred = vec![1u8, 0];
        let gt = vec![0u8, 1];
        assert_eq!(mean_iou(&pred, &gt, 2).unwrap(), 0.0);

        assert!(matches!(
            mean_iou(&[3u8], &[0u8], 2),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mean_iou_is_symmetric() {
        let a = vec![0u8, 1, 2, 1, 0, 2, 2, 1];
        let b = vec![1u8, 1, 2, 0, 0, 2, 1, 1];
        assert_eq!(mean_iou(&a, &b, 3).unwrap(), mean_iou(&b, &a, 3).unwrap());
    }

    #[test]
    fn pixel_accuracy_pinned_cases() {
        let a = vec![1u8, 2, 3, 4];
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let b = vec![1u8, 2, 3, 0];
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.75);
        let c = vec![0u8, 0, 0, 0];
        assert_eq!(pixel_accuracy(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn depth_metrics_pinned_cases() {
        let gt = vec![2.0f32; 8];
        let pred = vec![3.0f32; 8];
        let m = depth_metrics(&pred, &gt).unwrap();
        assert!((m.rel - 0.5).abs() < 1e-9);
        assert!((m.rms - 1.0).abs() < 1e-9);
        assert!((m.log10 - 1.5f64.log10()).abs() < 1e-9);

        let exact = depth_metrics(&gt, &gt).unwrap();
        assert_eq!(exact, DepthMetrics { rel: 0.0, rms: 0.0, log10: 0.0 });

        // Zero predictions clamp to the 1e-3 floor.
        let m = depth_metrics(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((m.rel - 0.999).abs() < 1e-6, "{}", m.rel);
        assert!((m.rms - 0.999).abs() < 1e-6);
        assert!((m.log10 - 3.0).abs() < 1e-6);

        assert!(depth_metrics(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn depth_rel_is_asymmetric() {
        let a = vec![1.0f32];
        let b = vec![2.0f32];
        let ab = depth_metrics(&a, &b).unwrap().rel;
        let ba = depth_metrics(&b, &a).unwrap().rel;
        assert!((ab - 0.5).abs() < 1e-9);
        assert!((ba - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_decode_contracts() {
        // One-hot recovers the hot index.
        let y = Tensor::from_vec(vec![-1.0, 1.0, -1.0], [1, 3, 1, 1]).unwrap();
        assert_eq!(labels_from_logits(&y, 3).unwrap(), vec![1]);

        // Uniform logits tie-break to class 0.
        let y = Tensor::from_vec(vec![0.5, 0.5, 0.5], [1, 3, 1, 1]).unwrap();
        assert_eq!(labels_from_logits(&y, 3).unwrap(), vec![0]);

        let y = Tensor::from_vec(vec![0.1, 0.9, 0.3], [1, 3, 1, 1]).unwrap();
        assert_eq!(labels_from_logits(&y, 3).unwrap(), vec![1]);
    }

    #[test]
    fn segmentation_one_hot_round_trip() {
        let spec = SceneSpec {
            seed: 11,
            canvas: 32,
            ..SceneSpec::default()
        };
        let pair = generate_sample(&spec, 0, TaskKind::Segmentation).unwrap();
        let decoded = labels_from_logits(&pair.y, pair.class_count).unwrap();
        let shapes = scene_shapes(&spec, 0);
        let (labels, _) = rasterize(&shapes, 32, spec.depth_range.1);
        assert_eq!(decoded, labels);
        assert_eq!(mean_iou(&decoded, &labels, 5).unwrap(), 1.0);
    }

    #[test]
    fn depth_encoding_round_trip() {
        for d in [0.5f32, 0.8, 2.0, 5.0, 9.9, 10.0] {
            let enc = encode_depth(d);
            assert!((-1.0..=1.0).contains(&enc));
            let back = decode_depth(enc);
            assert!((back - d).abs() < 1e-3, "{d} -> {enc} -> {back}");
        }
        // Out-of-range encodings still decode to positive depths.
        assert!(decode_depth(-5.0) > 0.0);
        assert!(decode_depth(5.0) > 0.0);
    }

    #[test]
    fn textured_render_inverts_to_labels() {
        let spec = SceneSpec {
            seed: 23,
            canvas: 32,
            ..SceneSpec::default()
        };
        let pair = generate_sample(&spec, 1, TaskKind::Segmentation).unwrap();
        let shapes = scene_shapes(&spec, 1);
        let (labels, _) = rasterize(&shapes, 32, spec.depth_range.1);
        let classified = classify_colors(&pair.x, spec.class_count).unwrap();
        let acc = pixel_accuracy(&classified, &labels).unwrap();
        assert!(acc > 0.995, "texture inverse map accuracy {acc}");
    }

    #[test]
    fn save_load_round_trip_all_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            seed: 5,
            canvas: 16,
            ..SceneSpec::default()
        };
        for task in [TaskKind::MaskToImage, TaskKind::Segmentation, TaskKind::Depth] {
            let pairs = generate_dataset(&spec, 3, task).unwrap();
            save_dataset(dir.path(), task, "train", spec.seed, &pairs).unwrap();
            let loaded = load_dataset(dir.path(), task, "train", spec.class_count).unwrap();
            assert_eq!(loaded.len(), 3);
            for (orig, back) in pairs.iter().zip(&loaded) {
                assert_eq!(orig.x.dims(), back.x.dims());
                assert_eq!(orig.y.dims(), back.y.dims());
                // Round trip is quantized for rasters; labels must be exact.
                if task == TaskKind::Segmentation {
                    assert_eq!(
                        labels_from_logits(&orig.y, 5).unwrap(),
                        labels_from_logits(&back.y, 5).unwrap()
                    );
                }
                for (a, b) in orig.x.to_vec().iter().zip(back.x.to_vec().iter()) {
                    assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn save_is_byte_identical_across_runs() {
        let spec = SceneSpec {
            seed: 9,
            canvas: 16,
            ..SceneSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for dir in [&d1, &d2] {
            let pairs = generate_dataset(&spec, 2, TaskKind::Depth).unwrap();
            save_dataset(dir.path(), TaskKind::Depth, "train", spec.seed, &pairs).unwrap();
        }
        for name in ["0_x.ppm", "0_y.pgm", "1_x.ppm", "manifest.txt"] {
            let a = std::fs::read(d1.path().join("depth/train").join(name)).unwrap();
            let b = std::fs::read(d2.path().join("depth/train").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across runs");
        }
    }
}
