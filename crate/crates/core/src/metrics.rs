//! Image comparison metrics: spectral angle, color-histogram distance,
//! windowed SSIM, MSE and PSNR.

use std::fmt::Write as _;

use bbdm_tensor::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

fn check_pair(op: &str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::invalid(format!("{op}: expected equal (C, H, W), got {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::invalid(format!("{op}: empty image")));
    }
    Ok(())
}

/// Mean spectral angle and the number of skipped zero-norm pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sam {
    pub radians: f64,
    pub skipped: usize,
}

/// Mean per-pixel angle between channel vectors. Pixels where either vector
/// has zero norm are skipped.
pub fn sam(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Sam> {
    check_pair("sam", a, b)?;
    let (c, plane) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let (ad, bd) = (a.data(), b.data());
    let (mut total, mut used) = (0.0, 0usize);
    for i in 0..plane {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let (x, y) = (f64::from(ad[k * plane + i]), f64::from(bd[k * plane + i]));
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos();
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("sam: every pixel has zero norm"));
    }
    Ok(Sam { radians: total / used as f64, skipped: plane - used })
}

fn histogram(plane: &[f32], bins: usize) -> Vec<u64> {
    let mut h = vec![0; bins];
    for &v in plane {
        let b = ((f64::from(v) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Mean over channels of the total-variation distance between normalized
/// per-channel histograms with `bins` bins over `[0, 1]`.
pub fn chd(a: &Tensor<f32>, b: &Tensor<f32>, bins: usize) -> Result<f64> {
    check_pair("chd", a, b)?;
    if bins == 0 {
        return Err(Error::invalid("chd: bins must be positive"));
    }
    let (c, plane) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let mut total = 0.0;
    for k in 0..c {
        let ha = histogram(&a.data()[k * plane..(k + 1) * plane], bins);
        let hb = histogram(&b.data()[k * plane..(k + 1) * plane], bins);
        // Integer counts keep the distance within [0, 1] exactly.
        let diff: u64 = ha.iter().zip(&hb).map(|(x, y)| x.abs_diff(*y)).sum();
        total += diff as f64 / (2 * plane) as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 8, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

/// SSIM of the channel-mean images averaged over non-overlapping windows.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, p: &SsimParams) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let win = p.window;
    if win == 0 || h < win || w < win {
        return Err(Error::invalid(format!("ssim: {h}x{w} image smaller than window {win}")));
    }
    let plane = h * w;
    let gray = |t: &Tensor<f32>| -> Vec<f64> {
        (0..plane).map(|i| (0..c).map(|k| f64::from(t.data()[k * plane + i])).sum::<f64>() / c as f64).collect()
    };
    let (ga, gb) = (gray(a), gray(b));
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..h / win {
        for wx in 0..w / win {
            let idx = || (0..win).flat_map(move |dy| (0..win).map(move |dx| (wy * win + dy) * w + wx * win + dx));
            let ma = idx().map(|i| ga[i]).sum::<f64>() / n;
            let mb = idx().map(|i| gb[i]).sum::<f64>() / n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in idx() {
                let (da, db) = (ga[i] - ma, gb[i] - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2)) / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `(mse, psnr)` for images in `[0, 1]`; PSNR is infinite for identical inputs.
pub fn psnr_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, f64)> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::invalid(format!("psnr_mse: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok((mse, psnr))
}

pub const CHD_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub sam: f64,
    pub sam_skipped: usize,
    pub chd: f64,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
}

impl MetricRow {
    pub fn compute(id: impl Into<String>, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Self> {
        let s = sam(pred, truth)?;
        let (mse, psnr) = psnr_mse(pred, truth)?;
        Ok(MetricRow {
            id: id.into(),
            sam: s.radians,
            sam_skipped: s.skipped,
            chd: chd(pred, truth, CHD_BINS)?,
            ssim: ssim(pred, truth, &SsimParams::default())?,
            mse,
            psnr,
        })
    }
}

/// Per-image metrics and their dataset means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("metric report needs at least one image"));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            id: "mean".into(),
            sam: avg(|r| r.sam),
            sam_skipped: rows.iter().map(|r| r.sam_skipped).sum(),
            chd: avg(|r| r.chd),
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
            psnr: avg(|r| r.psnr),
        };
        Ok(MetricReport { rows, mean })
    }

    /// Evaluate `(id, prediction, truth)` triples.
    pub fn evaluate<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>, &'a Tensor<f32>)>) -> Result<Self> {
        let rows = items.into_iter().map(|(id, p, t)| MetricRow::compute(id, p, t)).collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub const CSV_HEADER: &'static str = "id,sam,sam_skipped,chd,ssim,mse,psnr";

    /// One row per image, then a `mean` row. Infinite PSNR prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let psnr = if r.psnr.is_infinite() { "inf".to_string() } else { format!("{:.6}", r.psnr) };
            let _ = writeln!(out, "{},{:.8},{},{:.8},{:.8},{:.8e},{psnr}", r.id, r.sam, r.sam_skipped, r.chd, r.ssim, r.mse);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn sam_examples() {
        let a = img(3, 2, 2, |i| 0.1 + i as f32 * 0.05);
        let b = a.map(|v| 2.0 * v);
        assert!(sam(&a, &b).unwrap().radians < 1e-6);
        let red = img(3, 1, 1, |i| if i == 0 { 1.0 } else { 0.0 });
        let green = img(3, 1, 1, |i| if i == 1 { 1.0 } else { 0.0 });
        assert!((sam(&red, &green).unwrap().radians - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let zero = Tensor::zeros(vec![3, 1, 1]);
        assert!(sam(&zero, &red).is_err());
    }

    #[test]
    fn chd_examples() {
        let black = Tensor::zeros(vec![3, 4, 4]);
        let white = Tensor::full(vec![3, 4, 4], 1.0f32);
        assert_eq!(chd(&black, &black, 256).unwrap(), 0.0);
        assert_eq!(chd(&black, &white, 256).unwrap(), 1.0);
    }

    #[test]
    fn psnr_examples() {
        let z = Tensor::zeros(vec![3, 4, 4]);
        let h = Tensor::full(vec![3, 4, 4], 0.5f32);
        let (mse, psnr) = psnr_mse(&z, &h).unwrap();
        assert_eq!(mse, 0.25);
        assert!((psnr - 6.0206).abs() < 1e-4);
        assert_eq!(psnr_mse(&z, &z).unwrap(), (0.0, f64::INFINITY));
    }

    #[test]
    fn csv_has_mean_row() {
        let a = img(3, 8, 8, |i| (i % 7) as f32 / 7.0 + 0.01);
        let r = MetricReport::evaluate([("x", &a, &a)]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with(MetricReport::CSV_HEADER));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        assert!((r.mean.ssim - 1.0).abs() < 1e-12);
    }
}
