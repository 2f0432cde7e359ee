//! Brute-force reference implementations shared by the test targets.
#![allow(dead_code)]

use bbdm_tensor::{grad_check_with, Coords, Stencil, GradCheckReport, Graph, Rng, Tensor, TensorError, Var};
use cbbdm::denoiser::{Denoiser, DenoiserConfig};
use cbbdm::diffusion::{bridge_loss, BridgeBatch, Weighting};
use cbbdm::schedule::BridgeSchedule;

/// Posterior moments by brute-force integration of prior x likelihood.
pub fn bayes_oracle(x_t: f64, x0: f64, y: f64, t: usize, horizon: usize) -> (f64, f64) {
    let m = |k: usize| k as f64 / horizon as f64;
    let d = |k: usize| 2.0 * (m(k) - m(k) * m(k));
    let a = (1.0 - m(t)) / (1.0 - m(t - 1));
    let b = m(t) - a * m(t - 1);
    let var_l = d(t) - a * a * d(t - 1);
    let (mu_p, var_p) = ((1.0 - m(t - 1)) * x0 + m(t - 1) * y, d(t - 1));
    let log_p = |x: f64| -(x - mu_p).powi(2) / (2.0 * var_p) - (x_t - a * x - b * y).powi(2) / (2.0 * var_l);
    // Coarse scan over a span holding both the prior and the likelihood peak,
    // then a fine grid around the maximum.
    let (mu_l, sd_l) = ((x_t - b * y) / a, var_l.sqrt() / a);
    let sd = var_p.sqrt().min(sd_l);
    let span = 14.0 * var_p.sqrt().max(sd_l);
    let (lo, hi) = (mu_p.min(mu_l) - span, mu_p.max(mu_l) + span);
    let coarse = (0..=200_000).map(|i| lo + i as f64 * (hi - lo) / 200_000.0);
    let centre = coarse.map(|x| (log_p(x), x)).fold((f64::NEG_INFINITY, 0.0), |m, p| if p.0 > m.0 { p } else { m }).1;
    let (lo, k) = (centre - 14.0 * sd, 40_000);
    let h = 28.0 * sd / k as f64;
    let grid: Vec<f64> = (0..=k).map(|i| lo + i as f64 * h).collect();
    let peak = grid.iter().map(|&x| log_p(x)).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = grid.iter().map(|&x| (log_p(x) - peak).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean = grid.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
    let var = grid.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
    (mean, var)
}

pub fn rand_img(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

pub fn px(t: &Tensor<f32>, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    f64::from(t.data()[(c * s[1] + y) * s[2] + x])
}

/// Angle via atan2 of the cross-product norm, a different route from acos.
pub fn sam_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s = a.shape();
    let (mut sum, mut n) = (0.0, 0);
    for y in 0..s[1] {
        for x in 0..s[2] {
            let u: Vec<f64> = (0..s[0]).map(|c| px(a, c, y, x)).collect();
            let v: Vec<f64> = (0..s[0]).map(|c| px(b, c, y, x)).collect();
            let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
            let uu: f64 = u.iter().map(|p| p * p).sum();
            let vv: f64 = v.iter().map(|p| p * p).sum();
            if uu == 0.0 || vv == 0.0 {
                continue;
            }
            // |u x v|^2 = |u|^2 |v|^2 - (u.v)^2 (Lagrange identity).
            let cross = (uu * vv - dot * dot).max(0.0).sqrt();
            sum += cross.atan2(dot);
            n += 1;
        }
    }
    sum / n as f64
}

/// SSIM with moments from raw sums: E[xy] - E[x]E[y].
pub fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>, win: usize) -> f64 {
    let s = a.shape();
    let gray = |t: &Tensor<f32>, y: usize, x: usize| (0..s[0]).map(|c| px(t, c, y, x)).sum::<f64>() / s[0] as f64;
    let (c1, c2) = (1e-4, 9e-4);
    let mut vals = Vec::new();
    for by in 0..s[1] / win {
        for bx in 0..s[2] / win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in by * win..(by + 1) * win {
                for x in bx * win..(bx + 1) * win {
                    let (p, q) = (gray(a, y, x), gray(b, y, x));
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let n = (win * win) as f64;
            let (ma, mb) = (sa / n, sb / n);
            let (va, vb, cov) = (saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb);
            vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}


/// Small UNet: 4 latent channels, widths 8 and 16, attention at the bottom.
pub fn tiny_config(cond: bool) -> DenoiserConfig {
    let c = if cond { 3 } else { 0 };
    DenoiserConfig {
        latent_channels: 4,
        cond_channels: c,
        source_channels: c,
        encoder_channels: c,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_level: None,
        time_embed_dim: 8,
        groups: 4,
        horizon: 10,
    }
}

/// Replace the zero-initialised output conv so gradients reach every layer.
pub fn perturb_output(d: &mut Denoiser<f64>, seed: u64) {
    let mut r = Rng::new(seed);
    for name in ["out.conv.weight", "out.conv.bias"] {
        let t = d.params.get_mut(name).unwrap();
        *t = Tensor::randn(t.shape().to_vec(), &mut r).map(|v| 0.05 * v);
    }
}

/// Attention key biases add `q . b` to every logit of a query, which the
/// softmax ignores; their gradient is exactly zero, so a relative error on
/// them measures only round-off.
pub fn structurally_zero(name: &str) -> bool {
    name.ends_with("attn.k.bias")
}

/// Two-point differences at 1e-5 carry about 5e-11 of absolute round-off on
/// a loss near 1, more than 1e-4 relative on coordinates whose gradient is
/// below 1e-6. Those are measured again with a four-point stencil.
pub const FD_STENCIL: Stencil = Stencil::Refined { tol: 1e-4, wide: 1e-3 };

pub struct LossGradCheck {
    /// Central differences on every other parameter coordinate.
    pub report: GradCheckReport,
    /// Largest autodiff gradient magnitude on the structurally zero coordinates.
    pub zero_grad_max: f64,
    pub zero_grad_count: usize,
}

/// Central differences against autodiff for the conditioned bridge loss,
/// over every parameter of the tiny model on 8x8 latents.
pub fn conditioned_loss_grad_check(seed: u64) -> LossGradCheck {
    let horizon = 10;
    let sched = BridgeSchedule::new(horizon).unwrap();
    let mut d = Denoiser::<f64>::init(tiny_config(true), &Rng::new(100 + seed)).unwrap();
    perturb_output(&mut d, 200 + seed);
    let mut r = Rng::new(300 + seed);
    let shape = vec![1, 4, 8, 8];
    let batch = BridgeBatch::new(
        Tensor::randn(shape.clone(), &mut r),
        Tensor::randn(shape.clone(), &mut r),
        vec![r.range_inclusive(1, horizon)],
        Tensor::randn(shape, &mut r),
    )
    .unwrap();
    let source = Tensor::randn(vec![1, 3, 32, 32], &mut r);
    let fixed: Vec<bool> = d.params.iter().map(|(n, _)| structurally_zero(n)).collect();
    fn loss<'g>(
        d: &Denoiser<f64>,
        g: &'g Graph<f64>,
        all: &[Var<'g, f64>],
        source: &Tensor<f64>,
        batch: &BridgeBatch<f64>,
        sched: &BridgeSchedule,
    ) -> cbbdm::Result<Var<'g, f64>> {
        let bound = d.bind_vars(all)?;
        let cond = bound.condition(Some(g.constant(source.clone())), None, (8, 8))?;
        bridge_loss(&bound, g, batch, cond, sched, Weighting::Simplified)
    }

    let g = Graph::new();
    let all: Vec<_> = d.params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let grads = g.backward(loss(&d, &g, &all, &source, &batch, &sched).unwrap()).unwrap();
    let zeros: Vec<f64> = all
        .iter()
        .zip(&fixed)
        .filter(|(_, &f)| f)
        .flat_map(|(v, _)| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();

    let free: Vec<Tensor<f64>> = d.params.iter().zip(&fixed).filter(|(_, &f)| !f).map(|((_, t), _)| t.clone()).collect();
    let report = grad_check_with(
        |g, vars| {
            let mut it = vars.iter();
            let all: Vec<Var<f64>> = d
                .params
                .iter()
                .zip(&fixed)
                .map(|((_, t), &f)| if f { g.constant(t.clone()) } else { *it.next().unwrap() })
                .collect();
            loss(&d, g, &all, &source, &batch, &sched).map_err(|e| TensorError::InvalidArgument(e.to_string()))
        },
        &free,
        Coords::All,
        1e-5,
        FD_STENCIL,
    )
    .unwrap();
    LossGradCheck {
        report,
        zero_grad_max: zeros.iter().fold(0.0, |m, v| m.max(v.abs())),
        zero_grad_count: zeros.len(),
    }
}
