//! Forward and adjoint kernels over flat row-major buffers.
//!
//! Shapes are validated by the graph layer before these run.

use crate::element::{gemm, Element, MatRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfold one `C x H x W` image into a `(C*kh*kw) x (Ho*Wo)` patch matrix.
fn im2col<E: Element>(img: &[E], g: &ConvGeom, cols: &mut [E]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    // Output columns whose input column lies inside the image.
                    let shift = kj as isize - pad;
                    let lo = (-shift).clamp(0, wo as isize) as usize;
                    let hi = (g.w as isize - shift).clamp(lo as isize, wo as isize) as usize;
                    out_row[..lo].iter_mut().for_each(|v| *v = E::zero());
                    out_row[hi..].iter_mut().for_each(|v| *v = E::zero());
                    let start = (lo as isize + shift) as usize;
                    out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im<E: Element>(cols: &[E], g: &ConvGeom, img: &mut [E]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = ox as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<E: Element>(
    input: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    g: &ConvGeom,
) -> Vec<E> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let mut out = vec![E::zero(); g.n * g.o * hw_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![E::zero(); g.col_rows() * hw_out] };
    let wmat = MatRef::new(weight, g.o, g.col_rows());
    for n in 0..g.n {
        let img = &input[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dst = &mut out[n * g.o * hw_out..(n + 1) * g.o * hw_out];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(hw_out).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let rhs = if g.is_pointwise() {
            MatRef::new(img, g.c, hw_out)
        } else {
            im2col(img, g, &mut cols);
            MatRef::new(&cols, g.col_rows(), hw_out)
        };
        gemm(wmat, rhs, dst, bias.is_some());
    }
    out
}

pub(crate) struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<E> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let k = g.col_rows();
    let mut d_input = want.0.then(|| vec![E::zero(); input.len()]);
    let mut d_weight = want.1.then(|| vec![E::zero(); weight.len()]);
    let d_bias = want.2.then(|| {
        let mut db = vec![E::zero(); g.o];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let row = &grad_out[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
                *acc = *acc + row.iter().copied().sum::<E>();
            }
        }
        db
    });
    let mut cols = vec![E::zero(); if g.is_pointwise() { 0 } else { k * hw_out }];
    let mut dcols = vec![E::zero(); if want.0 && !g.is_pointwise() { k * hw_out } else { 0 }];
    for n in 0..g.n {
        let img = &input[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dy = MatRef::new(&grad_out[n * g.o * hw_out..(n + 1) * g.o * hw_out], g.o, hw_out);
        if let Some(dw) = d_weight.as_mut() {
            let cols_t = if g.is_pointwise() {
                MatRef::t(img, hw_out, k)
            } else {
                im2col(img, g, &mut cols);
                MatRef::t(&cols, hw_out, k)
            };
            gemm(dy, cols_t, dw, true);
        }
        if let Some(dx) = d_input.as_mut() {
            let wt = MatRef::t(weight, k, g.o);
            let dimg = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                gemm(wt, dy, dimg, true);
            } else {
                gemm(wt, dy, &mut dcols, false);
                col2im(&dcols, g, dimg);
            }
        }
    }
    ConvGrads { input: d_input, weight: d_weight, bias: d_bias }
}

/// `y (rows x out) = x (rows x in) @ W^T + b`, with `W` stored `out x in`.
pub(crate) fn linear_forward<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<E> {
    let mut y = vec![E::zero(); rows * fan_out];
    if let Some(b) = b {
        for row in y.chunks_mut(fan_out) {
            row.copy_from_slice(b);
        }
    }
    gemm(MatRef::new(x, rows, fan_in), MatRef::t(w, fan_in, fan_out), &mut y, b.is_some());
    y
}

pub(crate) fn linear_backward<E: Element>(
    x: &[E],
    w: &[E],
    dy: &[E],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    want: (bool, bool, bool),
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let dx = want.0.then(|| {
        let mut dx = vec![E::zero(); rows * fan_in];
        gemm(MatRef::new(dy, rows, fan_out), MatRef::new(w, fan_out, fan_in), &mut dx, false);
        dx
    });
    let dw = want.1.then(|| {
        let mut dw = vec![E::zero(); fan_out * fan_in];
        gemm(MatRef::t(dy, fan_out, rows), MatRef::new(x, rows, fan_in), &mut dw, false);
        dw
    });
    let db = want.2.then(|| {
        let mut db = vec![E::zero(); fan_out];
        for row in dy.chunks(fan_out) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Align-corners sampling table: for each destination index, the two source
/// taps and the weight of the upper tap.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<E: Element>(
    input: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<E> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = E::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = E::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (E::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (E::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (E::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<E: Element>(
    grad_out: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<E> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let dy = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = E::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = E::from_f64_lossy(fx);
                let g = dy[oy * ow + ox];
                let (gt, gb) = (g * (E::one() - fy), g * fy);
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (E::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (E::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * fx;
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2_forward<E: Element>(input: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64_lossy(0.25);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let s = src[y * w + x] + src[y * w + x + 1] + src[(y + 1) * w + x] + src[(y + 1) * w + x + 1];
                out[(p * oh + oy) * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<E: Element>(grad_out: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64_lossy(0.25);
    let mut dx = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = grad_out[(p * oh + y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

pub(crate) fn upsample2_forward<E: Element>(input: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[(p * oh + y) * ow + x] = input[(p * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<E: Element>(grad_out: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let i = (p * h + y / 2) * w + x / 2;
                dx[i] = dx[i] + grad_out[(p * oh + y) * ow + x];
            }
        }
    }
    dx
}

/// Per-(sample, group) statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

pub(crate) fn group_norm_forward<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> (Vec<E>, GroupStats<E>) {
    let cpg = c / groups;
    let len = E::from_usize(cpg * hw).unwrap();
    let mut y = vec![E::zero(); x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(n * groups), rstd: Vec::with_capacity(n * groups) };
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * cpg) * hw;
            let seg = &x[start..start + cpg * hw];
            let mean = seg.iter().copied().sum::<E>() / len;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / len;
            let rstd = E::one() / (var + E::from_f64_lossy(eps)).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    y[i] = (x[i] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<E: Element>(
    x: &[E],
    gamma: &[E],
    dy: &[E],
    stats: &GroupStats<E>,
    (n, c, hw): (usize, usize, usize),
    groups: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let cpg = c / groups;
    let len = E::from_usize(cpg * hw).unwrap();
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for s in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = (stats.mean[s * groups + gi], stats.rstd[s * groups + gi]);
            let start = (s * c + gi * cpg) * hw;
            // Sums of dxhat and dxhat * xhat over the group.
            let mut sum_d = E::zero();
            let mut sum_dx = E::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let d = dy[i] * gamma[ch];
                    sum_d = sum_d + d;
                    sum_dx = sum_dx + d * xhat;
                    dgamma[ch] = dgamma[ch] + dy[i] * xhat;
                    dbeta[ch] = dbeta[ch] + dy[i];
                }
            }
            let (mean_d, mean_dx) = (sum_d / len, sum_dx / len);
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * rstd;
                    dx[i] = rstd * (dy[i] * gamma[ch] - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Scaled dot-product attention over `(batch, tokens, dim)` operands.
/// Returns the output and the softmax matrices `(batch, tq, tk)`.
pub(crate) fn attention_forward<E: Element>(
    q: &[E],
    k: &[E],
    v: &[E],
    (n, tq, tk, d, dv): (usize, usize, usize, usize, usize),
) -> (Vec<E>, Vec<E>) {
    let scale = E::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut probs = vec![E::zero(); n * tq * tk];
    let mut out = vec![E::zero(); n * tq * dv];
    for b in 0..n {
        let qb = &q[b * tq * d..(b + 1) * tq * d];
        let kb = &k[b * tk * d..(b + 1) * tk * d];
        let vb = &v[b * tk * dv..(b + 1) * tk * dv];
        let pb = &mut probs[b * tq * tk..(b + 1) * tq * tk];
        gemm(MatRef::new(qb, tq, d), MatRef::t(kb, d, tk), pb, false);
        for row in pb.chunks_mut(tk) {
            let max = row.iter().fold(E::neg_infinity(), |m, &s| m.max(s * scale));
            let mut total = E::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total = total + *s;
            }
            row.iter_mut().for_each(|s| *s = *s / total);
        }
        gemm(MatRef::new(pb, tq, tk), MatRef::new(vb, tk, dv), &mut out[b * tq * dv..(b + 1) * tq * dv], false);
    }
    (out, probs)
}

pub(crate) fn attention_backward<E: Element>(
    q: &[E],
    k: &[E],
    v: &[E],
    probs: &[E],
    dout: &[E],
    (n, tq, tk, d, dv): (usize, usize, usize, usize, usize),
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let scale = E::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut dq = vec![E::zero(); q.len()];
    let mut dk = vec![E::zero(); k.len()];
    let mut dv_buf = vec![E::zero(); v.len()];
    let mut dp = vec![E::zero(); tq * tk];
    for b in 0..n {
        let qb = &q[b * tq * d..(b + 1) * tq * d];
        let kb = &k[b * tk * d..(b + 1) * tk * d];
        let vb = &v[b * tk * dv..(b + 1) * tk * dv];
        let pb = &probs[b * tq * tk..(b + 1) * tq * tk];
        let dob = &dout[b * tq * dv..(b + 1) * tq * dv];
        // dV = P^T dO
        gemm(MatRef::t(pb, tk, tq), MatRef::new(dob, tq, dv), &mut dv_buf[b * tk * dv..(b + 1) * tk * dv], false);
        // dP = dO V^T
        gemm(MatRef::new(dob, tq, dv), MatRef::t(vb, dv, tk), &mut dp, false);
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
        for (drow, prow) in dp.chunks_mut(tk).zip(pb.chunks(tk)) {
            let dot = drow.iter().zip(prow).map(|(&g, &p)| g * p).sum::<E>();
            for (g, &p) in drow.iter_mut().zip(prow) {
                *g = p * (*g - dot) * scale;
            }
        }
        gemm(MatRef::new(&dp, tq, tk), MatRef::new(kb, tk, d), &mut dq[b * tq * d..(b + 1) * tq * d], false);
        gemm(MatRef::t(&dp, tk, tq), MatRef::new(qb, tq, d), &mut dk[b * tk * d..(b + 1) * tk * d], false);
    }
    (dq, dk, dv_buf)
}

/// `(N, C, H, W) -> (N, H*W, C)`; applying it to `(N, HW, C)` with
/// `(c, hw)` swapped performs the inverse.
pub(crate) fn transpose_last2<E: Element>(x: &[E], n: usize, rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for b in 0..n {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Concatenate two NCHW buffers along channels.
pub(crate) fn concat_channels<E: Element>(a: &[E], b: &[E], n: usize, ca: usize, cb: usize, hw: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a[s * ca * hw..(s + 1) * ca * hw]);
        out.extend_from_slice(&b[s * cb * hw..(s + 1) * cb * hw]);
    }
    out
}

pub(crate) fn split_channels<E: Element>(g: &[E], n: usize, ca: usize, cb: usize, hw: usize) -> (Vec<E>, Vec<E>) {
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let base = s * (ca + cb) * hw;
        ga.extend_from_slice(&g[base..base + ca * hw]);
        gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
    }
    (ga, gb)
}

#[inline]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}
