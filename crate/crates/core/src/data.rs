//! Synthetic paired SAR/optical scenes and SAR preprocessing: false-color
//! compositing, CLAHE, background-aware cropping, longitude splits, flips,
//! manifests and image files.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bbdm_tensor::{io as tio, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A co-registered (source, target) pair, each `(3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub longitude: f64,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, source: Tensor<f32>, target: Tensor<f32>, longitude: f64) -> Result<Self> {
        let id = id.into();
        if source.shape() != target.shape() || source.rank() != 3 {
            return Err(Error::Dataset(format!(
                "{id}: source {:?} and target {:?} must be equal (C, H, W)",
                source.shape(),
                target.shape()
            )));
        }
        let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&source) || !in_range(&target) {
            return Err(Error::Dataset(format!("{id}: pixel values outside [0, 1]")));
        }
        if !longitude.is_finite() {
            return Err(Error::Dataset(format!("{id}: non-finite longitude")));
        }
        Ok(PairedSample { id, source, target, longitude })
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Number of looks of the multiplicative speckle.
    pub looks: u32,
    /// Wavelength in pixels of the background texture.
    pub texture_scale: f64,
    pub seed: u64,
    /// Longitude of sample 0 and spacing between consecutive samples, degrees.
    pub longitude_origin: f64,
    pub longitude_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            min_shapes: 3,
            max_shapes: 8,
            looks: 1,
            texture_scale: 24.0,
            seed: 0,
            longitude_origin: 4.0,
            longitude_step: 1e-4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.size == 0 || self.size % 4 != 0 {
            return fail(format!("size {} must be a positive multiple of 4", self.size));
        }
        if self.min_shapes > self.max_shapes {
            return fail(format!("min_shapes {} > max_shapes {}", self.min_shapes, self.max_shapes));
        }
        if self.looks == 0 {
            return fail("looks must be at least 1".into());
        }
        if !(self.texture_scale > 0.0) {
            return fail("texture_scale must be positive".into());
        }
        if !(self.longitude_step > 0.0) || !self.longitude_origin.is_finite() {
            return fail("longitude grid must be finite and increasing".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Building,
    Water,
    Road,
    Tree,
}

impl Material {
    /// Clean backscatter intensity.
    fn intensity(self) -> f64 {
        match self {
            Material::Building => 0.7,
            Material::Water => 0.04,
            Material::Road => 0.12,
            Material::Tree => 0.45,
        }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    material: Material,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    half_u: f64,
    half_v: f64,
    angle: f64,
    ellipse: bool,
}

impl Shape {
    fn random(rng: &mut Rng, size: f64) -> Shape {
        let material = match rng.below(4) {
            0 | 1 => Material::Building,
            2 => Material::Water,
            _ => if rng.bernoulli(0.5) { Material::Road } else { Material::Tree },
        };
        let jitter = |rng: &mut Rng, c: [f64; 3]| c.map(|v| (v + 0.08 * (rng.uniform() - 0.5)).clamp(0.0, 1.0));
        let palette = match material {
            Material::Building => {
                if rng.bernoulli(0.5) { [0.72, 0.32, 0.26] } else { [0.62, 0.62, 0.66] }
            }
            Material::Water => [0.1, 0.2, 0.45],
            Material::Road => [0.38, 0.37, 0.36],
            Material::Tree => [0.1, 0.36, 0.12],
        };
        let color = jitter(rng, palette);
        let (cx, cy) = (rng.uniform() * size, rng.uniform() * size);
        let angle = rng.uniform() * PI;
        let s = size / 64.0;
        let (half_u, half_v, ellipse) = match material {
            Material::Building => (s * (3.0 + 5.0 * rng.uniform()), s * (3.0 + 5.0 * rng.uniform()), false),
            Material::Water => (s * (6.0 + 8.0 * rng.uniform()), s * (4.0 + 6.0 * rng.uniform()), true),
            Material::Road => (size, s * (1.5 + 1.5 * rng.uniform()), false),
            Material::Tree => (s * (2.0 + 3.0 * rng.uniform()), s * (2.0 + 3.0 * rng.uniform()), true),
        };
        Shape { material, color, cx, cy, half_u, half_v, angle, ellipse }
    }

    /// `None` outside; otherwise whether the pixel lies on the rim.
    fn hit(&self, x: f64, y: f64) -> Option<bool> {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        if self.ellipse {
            let r = (u / self.half_u).powi(2) + (v / self.half_v).powi(2);
            if r > 1.0 {
                return None;
            }
            let inner = ((u / (self.half_u - 1.0).max(0.5)).powi(2) + (v / (self.half_v - 1.0).max(0.5)).powi(2)) > 1.0;
            Some(inner)
        } else {
            if u.abs() > self.half_u || v.abs() > self.half_v {
                return None;
            }
            Some(u.abs() > self.half_u - 1.0 || v.abs() > self.half_v - 1.0)
        }
    }
}

/// A synthetic scene before speckle.
#[derive(Debug, Clone)]
pub struct SynthScene {
    /// Optical-like image `(3, H, W)`.
    pub target: Tensor<f32>,
    /// Speckle-free backscatter intensity `(H, W)`.
    pub clean: Tensor<f32>,
}

/// Render the speckle-free scene for sample `index`.
pub fn synth_scene(cfg: &SynthConfig, index: u64) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork_indexed("scene", index);
    let n = cfg.size;
    let size = n as f64;
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let dir = rng.uniform() * TAU;
            let k = TAU / (cfg.texture_scale * (0.7 + 0.6 * rng.uniform()));
            (k * dir.cos(), k * dir.sin(), rng.uniform() * TAU)
        })
        .collect();
    let count = rng.range_inclusive(cfg.min_shapes, cfg.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, size)).collect();

    let (soil, grass) = ([0.55, 0.47, 0.33], [0.27, 0.46, 0.21]);
    let mut target = vec![0f32; 3 * n * n];
    let mut clean = vec![0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let f = waves.iter().map(|&(kx, ky, ph)| (kx * xf + ky * yf + ph).sin()).sum::<f64>() / 6.0 + 0.5;
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = f * soil[c] + (1.0 - f) * grass[c];
            }
            let mut intensity = 0.2 + 0.12 * f;
            for s in &shapes {
                if let Some(rim) = s.hit(xf, yf) {
                    color = s.color;
                    intensity = s.material.intensity();
                    if rim && s.material == Material::Building {
                        intensity = 0.95;
                    }
                }
            }
            let i = y * n + x;
            for c in 0..3 {
                target[c * n * n + i] = color[c].clamp(0.0, 1.0) as f32;
            }
            clean[i] = intensity as f32;
        }
    }
    Ok(SynthScene { target: Tensor::new(vec![3, n, n], target)?, clean: Tensor::new(vec![n, n], clean)? })
}

/// Multiplicative speckle field with unit mean: `Gamma(L, 1/L)` per pixel.
pub fn speckle(len: usize, looks: u32, rng: &mut Rng) -> Vec<f64> {
    let l = f64::from(looks);
    (0..len).map(|_| rng.gamma(l, 1.0 / l)).collect()
}

/// Generate sample `index`: speckled source replicated to 3 channels.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<PairedSample> {
    let scene = synth_scene(cfg, index)?;
    let root = Rng::new(cfg.seed);
    let mut srng = root.fork_indexed("speckle", index);
    let n = cfg.size;
    let g = speckle(n * n, cfg.looks, &mut srng);
    let plane: Vec<f32> = scene.clean.data().iter().zip(&g).map(|(&c, &s)| (f64::from(c) * s).min(1.0) as f32).collect();
    let source = Tensor::new(vec![3, n, n], plane.repeat(3))?;
    let jitter = root.fork_indexed("longitude", index).uniform() * 0.5 * cfg.longitude_step;
    let longitude = cfg.longitude_origin + index as f64 * cfg.longitude_step + jitter;
    PairedSample::new(format!("synth_{index:06}"), source, scene.target, longitude)
}

pub fn synth_generate(cfg: &SynthConfig, n: usize) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::invalid("synth_generate: n must be at least 1"));
    }
    (0..n as u64).map(|i| synth_sample(cfg, i)).collect()
}

/// Mean axial orientation difference (radians, in `[0, pi/2]`) between the
/// Sobel gradients of two `(H, W)` images, over pixels where both gradient
/// magnitudes exceed `threshold`. `None` when no pixel qualifies.
pub fn structure_alignment(a: &Tensor<f32>, b: &Tensor<f32>, threshold: f64) -> Result<Option<f64>> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::invalid(format!("structure_alignment: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let sobel = |t: &Tensor<f32>, y: usize, x: usize| {
        let p = |dy: isize, dx: isize| f64::from(t.data()[(y as isize + dy) as usize * w + (x as isize + dx) as usize]);
        let gx = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
        let gy = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
        (gx, gy)
    };
    let (mut total, mut count) = (0.0, 0usize);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (ax, ay) = sobel(a, y, x);
            let (bx, by) = sobel(b, y, x);
            if ax.hypot(ay) < threshold || bx.hypot(by) < threshold {
                continue;
            }
            let mut d = (ay.atan2(ax) - by.atan2(bx)).rem_euclid(PI);
            if d > FRAC_PI_2 {
                d = PI - d;
            }
            total += d;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Channel mean of a `(3, H, W)` image.
pub fn to_gray(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    if img.rank() != 3 {
        return Err(Error::invalid(format!("expected (C, H, W), got {:?}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let data = (0..plane).map(|i| (0..c).map(|k| img.data()[k * plane + i]).sum::<f32>() / c as f32).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

// ---------------------------------------------------------------------------
// SAR preprocessing
// ---------------------------------------------------------------------------

fn min_max(t: &Tensor<f32>) -> Vec<f32> {
    let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return vec![0.0; t.numel()];
    }
    t.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Stack VV, VH, HH intensities into a `(3, H, W)` image, each channel
/// min-max scaled to `[0, 1]`. Constant channels become 0.
pub fn false_color_composite(vv: &Tensor<f32>, vh: &Tensor<f32>, hh: &Tensor<f32>) -> Result<Tensor<f32>> {
    if vv.rank() != 2 || vv.shape() != vh.shape() || vv.shape() != hh.shape() {
        return Err(Error::invalid(format!(
            "false_color_composite: {:?}, {:?}, {:?}",
            vv.shape(),
            vh.shape(),
            hh.shape()
        )));
    }
    if [vv, vh, hh].iter().any(|t| t.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite())) {
        return Err(Error::invalid("false_color_composite: intensities must be finite and nonnegative"));
    }
    let mut data = min_max(vv);
    data.extend(min_max(vh));
    data.extend(min_max(hh));
    let s = vv.shape();
    Ok(Tensor::new(vec![3, s[0], s[1]], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheParams {
    pub tiles: usize,
    /// Clip limit in multiples of the uniform bin height; infinity disables clipping.
    pub clip: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles: 8, clip: 2.0, bins: 256 }
    }
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((f64::from(v) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * len / tiles, (i + 1) * len / tiles)).collect()
}

/// Per-tile lookup table; `None` marks a tile whose pixels all fall in one
/// bin, which maps its values through unchanged.
fn tile_lut(img: &[f32], w: usize, (y0, y1): (usize, usize), (x0, x1): (usize, usize), p: &ClaheParams) -> Option<Vec<f32>> {
    let mut hist = vec![0f64; p.bins];
    for y in y0..y1 {
        for x in x0..x1 {
            hist[bin_of(img[y * w + x], p.bins)] += 1.0;
        }
    }
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return None;
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    if p.clip.is_finite() {
        let limit = p.clip * n / p.bins as f64;
        let excess: f64 = hist.iter().map(|&c| (c - limit).max(0.0)).sum();
        let share = excess / p.bins as f64;
        hist.iter_mut().for_each(|c| *c = c.min(limit) + share);
    }
    let mut cdf = 0.0;
    Some(
        hist.iter()
            .map(|&c| {
                cdf += c;
                (cdf / n).clamp(0.0, 1.0) as f32
            })
            .collect(),
    )
}

/// Interpolation coordinates along one axis: the two tiles around `pos`
/// and the weight of the second.
fn axis_weights(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).unwrap();
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

/// Contrast-limited adaptive histogram equalization of a `(H, W)` image in `[0, 1]`.
pub fn clahe(img: &Tensor<f32>, params: &ClaheParams) -> Result<Tensor<f32>> {
    if img.rank() != 2 {
        return Err(Error::invalid(format!("clahe expects (H, W), got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ClaheParams { tiles, clip, bins } = *params;
    if tiles == 0 || bins == 0 || !(clip >= 1.0) {
        return Err(Error::invalid(format!("clahe: invalid parameters {params:?}")));
    }
    if h < tiles || w < tiles {
        return Err(Error::invalid(format!("clahe: {h}x{w} image smaller than {tiles}x{tiles} tile grid")));
    }
    let (rows, cols) = (tile_bounds(h, tiles), tile_bounds(w, tiles));
    let data = img.data();
    let luts: Vec<Vec<Option<Vec<f32>>>> =
        rows.iter().map(|&r| cols.iter().map(|&c| tile_lut(data, w, r, c, params)).collect()).collect();
    let center = |b: &(usize, usize)| (b.0 + b.1 - 1) as f64 / 2.0;
    let (cy, cx): (Vec<f64>, Vec<f64>) = (rows.iter().map(center).collect(), cols.iter().map(center).collect());

    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (r0, r1, wy) = axis_weights(y, &cy);
        for x in 0..w {
            let (c0, c1, wx) = axis_weights(x, &cx);
            let v = data[y * w + x].clamp(0.0, 1.0);
            let b = bin_of(v, bins);
            let map = |r: usize, c: usize| f64::from(luts[r][c].as_ref().map_or(v, |l| l[b]));
            let top = (1.0 - wx) * map(r0, c0) + wx * map(r0, c1);
            let bottom = (1.0 - wx) * map(r1, c0) + wx * map(r1, c1);
            out.push(((1.0 - wy) * top + wy * bottom).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Tensor::new(vec![h, w], out)?)
}

/// CLAHE applied to each channel of a `(C, H, W)` image.
pub fn clahe_channels(img: &Tensor<f32>, params: &ClaheParams) -> Result<Tensor<f32>> {
    if img.rank() != 3 {
        return Err(Error::invalid(format!("expected (C, H, W), got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut data = Vec::with_capacity(img.numel());
    for plane in img.data().chunks(h * w) {
        data.extend(clahe(&Tensor::new(vec![h, w], plane.to_vec())?, params)?.into_vec());
    }
    Ok(Tensor::new(img.shape().to_vec(), data)?)
}

/// Largest tolerated fraction of zero-intensity pixels in a kept crop.
pub const MAX_ZERO_FRACTION: f64 = 0.01;

/// Top-left corners of crops kept from a `(C, H, W)` tile: candidates at
/// offsets `{0, dim - crop}` per axis, kept when fewer than 1% of pixels
/// are zero in every channel.
pub fn crop_offsets(tile: &Tensor<f32>, crop: usize) -> Result<Vec<(usize, usize)>> {
    if tile.rank() != 3 {
        return Err(Error::invalid(format!("expected (C, H, W), got {:?}", tile.shape())));
    }
    let (c, h, w) = (tile.shape()[0], tile.shape()[1], tile.shape()[2]);
    if crop == 0 || crop > h || crop > w {
        return Err(Error::invalid(format!("crop {crop} does not fit a {h}x{w} tile")));
    }
    let axis = |dim: usize| {
        let mut v = vec![0, dim - crop];
        v.dedup();
        v
    };
    let plane = h * w;
    let mut kept = Vec::new();
    for &y0 in &axis(h) {
        for &x0 in &axis(w) {
            let zeros = (y0..y0 + crop)
                .flat_map(|y| (x0..x0 + crop).map(move |x| y * w + x))
                .filter(|&i| (0..c).all(|k| tile.data()[k * plane + i] == 0.0))
                .count();
            if (zeros as f64) < MAX_ZERO_FRACTION * (crop * crop) as f64 {
                kept.push((y0, x0));
            }
        }
    }
    Ok(kept)
}

/// `(C, crop, crop)` window of a `(C, H, W)` tensor at `(y0, x0)`.
pub fn crop_at(tile: &Tensor<f32>, (y0, x0): (usize, usize), crop: usize) -> Result<Tensor<f32>> {
    let s = tile.shape();
    if s.len() != 3 || y0 + crop > s[1] || x0 + crop > s[2] {
        return Err(Error::invalid(format!("crop at ({y0}, {x0}) size {crop} outside {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * crop * crop);
    for k in 0..c {
        for y in y0..y0 + crop {
            let row = (k * h + y) * w;
            data.extend_from_slice(&tile.data()[row + x0..row + x0 + crop]);
        }
    }
    Ok(Tensor::new(vec![c, crop, crop], data)?)
}

pub fn extract_crops(tile: &Tensor<f32>, crop: usize) -> Result<Vec<Tensor<f32>>> {
    crop_offsets(tile, crop)?.into_iter().map(|o| crop_at(tile, o, crop)).collect()
}

// ---------------------------------------------------------------------------
// Splitting and augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Samples closer than this (degrees) to the cut longitude are dropped.
    pub buffer: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, buffer: 0.0 }
    }
}

/// Anything carrying a longitude and an id.
pub trait Located {
    fn longitude(&self) -> f64;
    fn id(&self) -> &str;
}

impl Located for PairedSample {
    fn longitude(&self) -> f64 {
        self.longitude
    }
    fn id(&self) -> &str {
        &self.id
    }
}

/// West-to-east split: the westmost `train_fraction` of samples train, the
/// rest validate, and samples within `buffer` of the cut (the midpoint
/// between the two groups) are discarded. Samples sharing a longitude are
/// never separated; the cut moves to the nearest boundary between distinct
/// longitudes.
pub fn split_by_longitude<T: Located>(mut samples: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {} must lie in (0, 1)", spec.train_fraction)));
    }
    if !(spec.buffer >= 0.0) {
        return Err(Error::invalid("buffer must be nonnegative"));
    }
    if samples.iter().any(|s| !s.longitude().is_finite()) {
        return Err(Error::Dataset("non-finite longitude".into()));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::Dataset(format!("cannot split {n} sample(s)")));
    }
    samples.sort_by(|a, b| a.longitude().total_cmp(&b.longitude()).then_with(|| a.id().cmp(b.id())));
    let lon: Vec<f64> = samples.iter().map(Located::longitude).collect();
    let want = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    // Candidate boundaries k split [..k] / [k..] between distinct longitudes.
    let k = (1..n)
        .filter(|&k| lon[k - 1] < lon[k])
        .min_by_key(|&k| (k.abs_diff(want), k))
        .ok_or_else(|| Error::Dataset("all samples share one longitude; no disjoint split exists".into()))?;
    let cut = 0.5 * (lon[k - 1] + lon[k]);
    let mut train = Vec::with_capacity(k);
    let mut val = Vec::with_capacity(n - k);
    for (i, s) in samples.into_iter().enumerate() {
        if (s.longitude() - cut).abs() < spec.buffer {
            continue;
        }
        if i < k { train.push(s) } else { val.push(s) }
    }
    Ok((train, val))
}

/// Flip source and target together with probability `p`.
pub fn hflip_augment(pair: &PairedSample, rng: &mut Rng, p: f64) -> PairedSample {
    if rng.bernoulli(p) {
        PairedSample { source: pair.source.flip_last(), target: pair.target.flip_last(), ..pair.clone() }
    } else {
        pair.clone()
    }
}

// ---------------------------------------------------------------------------
// Manifests and image files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub longitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

/// Load the samples of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest_samples(path: &Path) -> Result<Vec<(ManifestRecord, PairedSample)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|r| {
            let source = load_image(&resolve(base, &r.source_path))?;
            let target = load_image(&resolve(base, &r.target_path))?;
            let s = PairedSample::new(r.id.clone(), source, target, r.longitude)?;
            Ok((r, s))
        })
        .collect()
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Save a `(3, H, W)` or `(1, H, W)` image in `[0, 1]`: 8-bit PNG for `.png`
/// paths, a tensor file otherwise.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    if !is_png(path) {
        tio::write_tensor(path, img)?;
        return Ok(());
    }
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::invalid(format!("PNG export needs (1|3, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut buf = vec![0u8; 3 * plane];
    for i in 0..plane {
        for k in 0..3 {
            let v = img.data()[(k % c) * plane + i];
            buf[3 * i + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    out.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Load a `(3, H, W)` image from PNG or tensor file. Tensor files may also
/// hold `(H, W)` rasters, returned as `(1, H, W)`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if is_png(path) {
        let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for k in 0..3 {
                data[k * plane + i] = f32::from(px[k]) / 255.0;
            }
        }
        return Ok(Tensor::new(vec![3, h, w], data)?);
    }
    let t = tio::read_tensor(path)?.into_dtype::<f32>();
    match t.rank() {
        3 => Ok(t),
        2 => {
            let s = t.shape().to_vec();
            Ok(t.reshape(vec![1, s[0], s[1]])?)
        }
        _ => Err(Error::Dataset(format!("{}: unexpected image shape {:?}", path.display(), t.shape()))),
    }
}

/// Sidecar describing one raw SAR/optical tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSidecar {
    pub id: String,
    pub longitude: f64,
    pub vv: PathBuf,
    pub vh: PathBuf,
    pub hh: PathBuf,
    /// Optical image, `(3, H, W)` in `[0, 1]`.
    pub optical: PathBuf,
}

fn load_raster(path: &Path) -> Result<Tensor<f32>> {
    let t = tio::read_tensor(path)?.into_dtype::<f32>();
    match t.shape() {
        [_, _] => Ok(t),
        [1, h, w] => Ok(t.reshape(vec![*h, *w])?),
        s => Err(Error::Dataset(format!("{}: expected a single-channel raster, got {s:?}", path.display()))),
    }
}

/// Turn one raw tile into training pairs: composite + CLAHE on the SAR
/// channels, then crops selected on the raw SAR intensities.
pub fn preprocess_tile(sidecar_path: &Path, crop: usize, params: &ClaheParams) -> Result<Vec<PairedSample>> {
    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let side: TileSidecar = serde_json::from_reader(BufReader::new(std::fs::File::open(sidecar_path)?))?;
    preprocess_sidecar(&side, base, crop, params)
}

/// As [`preprocess_tile`] for an already parsed sidecar whose relative paths
/// resolve against `base`.
pub fn preprocess_sidecar(side: &TileSidecar, base: &Path, crop: usize, params: &ClaheParams) -> Result<Vec<PairedSample>> {
    let (vv, vh, hh) = (
        load_raster(&resolve(base, &side.vv))?,
        load_raster(&resolve(base, &side.vh))?,
        load_raster(&resolve(base, &side.hh))?,
    );
    let optical = load_image(&resolve(base, &side.optical))?;
    let composite = clahe_channels(&false_color_composite(&vv, &vh, &hh)?, params)?;
    if optical.shape() != composite.shape() {
        return Err(Error::Dataset(format!(
            "{}: optical {:?} does not match SAR {:?}",
            side.id,
            optical.shape(),
            composite.shape()
        )));
    }
    let raw = Tensor::stack(&[vv, vh, hh])?;
    crop_offsets(&raw, crop)?
        .into_iter()
        .map(|(y, x)| {
            PairedSample::new(
                format!("{}_{y}_{x}", side.id),
                crop_at(&composite, (y, x), crop)?,
                crop_at(&optical, (y, x), crop)?.map(|v| v.clamp(0.0, 1.0)),
                side.longitude,
            )
        })
        .collect()
}

/// Write samples as image files plus a manifest in `dir`.
pub fn write_dataset(dir: &Path, samples: &[(PairedSample, Option<&str>)], ext: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (s, split) in samples {
        let src = PathBuf::from("images").join(format!("{}_source.{ext}", s.id));
        let tgt = PathBuf::from("images").join(format!("{}_target.{ext}", s.id));
        save_image(&dir.join(&src), &s.source)?;
        save_image(&dir.join(&tgt), &s.target)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            source_path: src,
            target_path: tgt,
            longitude: s.longitude,
            split: split.map(str::to_string),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
