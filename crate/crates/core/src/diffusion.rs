//! Forward processes, reverse steps, sampling loops and training losses for
//! the Brownian bridge and the Gaussian conditional baseline.
//!
//! The network predicts the bridge training target `m_t (y - x0) + sqrt(delta_t) eps`,
//! which equals `x_t - x0`; reverse steps recover `x0_hat = x_t - pred` and
//! plug it into the Gaussian posterior of the forward process.

use bbdm_tensor::{Element, Graph, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{BridgeSchedule, GaussianSchedule};

/// Anything that maps `(x_t, cond, t)` to a prediction shaped like `x_t`.
///
/// `x_t` and `cond` are NCHW; `t` holds one step per batch entry.
pub trait NoisePredictor<'g, E: Element> {
    fn predict(&self, x_t: Var<'g, E>, cond: Option<Var<'g, E>>, t: &[usize]) -> Result<Var<'g, E>>;
}

/// Loss weighting across timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every step weighted 1.
    #[default]
    Simplified,
    /// Per-step ELBO weight `c_eps(t)`.
    Elbo,
}

/// How training steps draw `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    #[default]
    Uniform,
    /// Each block of `T` draws visits every step once, in shuffled order.
    Stratified,
}

#[derive(Debug, Clone)]
pub struct TimestepSampler {
    mode: TimestepSampling,
    horizon: usize,
    pending: Vec<usize>,
}

impl TimestepSampler {
    pub fn new(mode: TimestepSampling, horizon: usize) -> Self {
        TimestepSampler { mode, horizon, pending: Vec::new() }
    }

    /// Next step in `1..=T`.
    pub fn next(&mut self, rng: &mut Rng) -> usize {
        match self.mode {
            TimestepSampling::Uniform => rng.range_inclusive(1, self.horizon),
            TimestepSampling::Stratified => {
                if self.pending.is_empty() {
                    self.pending = (1..=self.horizon).collect();
                    rng.shuffle(&mut self.pending);
                }
                self.pending.pop().unwrap()
            }
        }
    }
}

fn expect_same(op: &str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("{op}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn e<E: Element>(v: f64) -> E {
    E::from_f64_lossy(v)
}

/// Apply a per-sample function over the leading (batch) axis of several
/// equally shaped tensors.
fn per_sample<E: Element>(
    inputs: &[&Tensor<E>],
    steps: &[usize],
    f: impl Fn(usize, &[&[E]], &mut [E]),
) -> Tensor<E> {
    let shape = inputs[0].shape().to_vec();
    let n = shape.first().copied().unwrap_or(1).max(1);
    let chunk = inputs[0].numel() / n;
    let mut out = vec![E::zero(); inputs[0].numel()];
    for (i, dst) in out.chunks_mut(chunk.max(1)).enumerate() {
        let views: Vec<&[E]> = inputs.iter().map(|t| &t.data()[i * chunk..(i + 1) * chunk]).collect();
        f(steps[i], &views, dst);
    }
    Tensor::new(shape, out).expect("shape preserved")
}

fn batch_len<E: Element>(x: &Tensor<E>) -> usize {
    x.shape().first().copied().unwrap_or(1)
}

// ---------------------------------------------------------------------------
// Brownian bridge
// ---------------------------------------------------------------------------

/// Sample `x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps`, `0 <= t <= T`.
pub fn bridge_forward_sample<E: Element>(
    x0: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &BridgeSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    expect_same("bridge_forward_sample", x0, y)?;
    expect_same("bridge_forward_sample", x0, eps)?;
    let (m, sd) = (e::<E>(sched.m(t)), e::<E>(sched.delta(t).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(y.data())
        .zip(eps.data())
        .map(|((&a, &b), &z)| (E::one() - m) * a + m * b + sd * z)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Per-sample version of [`bridge_forward_sample`] with one step per batch entry.
pub fn bridge_forward_batch<E: Element>(
    x0: &Tensor<E>,
    y: &Tensor<E>,
    t: &[usize],
    eps: &Tensor<E>,
    sched: &BridgeSchedule,
) -> Result<Tensor<E>> {
    expect_same("bridge_forward_batch", x0, y)?;
    expect_same("bridge_forward_batch", x0, eps)?;
    if t.len() != batch_len(x0) {
        return Err(Error::invalid(format!("{} steps for a batch of {}", t.len(), batch_len(x0))));
    }
    for &s in t {
        sched.check_t(s)?;
    }
    Ok(per_sample(&[x0, y, eps], t, |t, v, dst| {
        let (m, sd) = (e::<E>(sched.m(t)), e::<E>(sched.delta(t).sqrt()));
        for (i, o) in dst.iter_mut().enumerate() {
            *o = (E::one() - m) * v[0][i] + m * v[1][i] + sd * v[2][i];
        }
    }))
}

/// Sample `x_t` given `x_{t-1}` from the one-step transition.
pub fn bridge_transition_sample<E: Element>(
    x_prev: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut Rng,
) -> Result<Tensor<E>> {
    sched.check_step(t)?;
    expect_same("bridge_transition_sample", x_prev, y)?;
    if t == sched.horizon() {
        return Ok(y.clone());
    }
    let (a, b, _) = sched.transition(t - 1, t);
    let sd = sched.delta_cond(t).sqrt();
    let (a, b, sd) = (e::<E>(a), e::<E>(b), e::<E>(sd));
    let data = x_prev
        .data()
        .iter()
        .zip(y.data())
        .map(|(&x, &yv)| a * x + b * yv + sd * e::<E>(rng.normal()))
        .collect();
    Ok(Tensor::new(x_prev.shape().to_vec(), data)?)
}

/// Gaussian posterior `q(x_{t-1} | x_t, x0_hat, y)`.
pub fn bridge_posterior<E: Element>(
    x_t: &Tensor<E>,
    x0_hat: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<(Tensor<E>, f64)> {
    sched.check_step(t)?;
    bridge_posterior_between(x_t, x0_hat, y, t, t - 1, sched)
}

/// Posterior of `x_s` given `x_t`, `x0_hat` and `y` for any `0 <= s < t`.
/// Reduces to [`bridge_posterior`] when `s = t - 1`.
pub fn bridge_posterior_between<E: Element>(
    x_t: &Tensor<E>,
    x0_hat: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    s: usize,
    sched: &BridgeSchedule,
) -> Result<(Tensor<E>, f64)> {
    sched.check_step(t)?;
    if s >= t {
        return Err(Error::invalid(format!("posterior target step {s} must precede {t}")));
    }
    expect_same("bridge_posterior", x_t, x0_hat)?;
    expect_same("bridge_posterior", x_t, y)?;
    if s == 0 {
        return Ok((x0_hat.clone(), 0.0));
    }
    let m_s = sched.m(s);
    if t == sched.horizon() {
        // No likelihood information at the source endpoint: forward marginal at s.
        let mean = x0_hat.lin_comb(e(1.0 - m_s), y, e(m_s))?;
        return Ok((mean, sched.delta(s)));
    }
    let (a, b, cond_var) = sched.transition(s, t);
    let (cond_var, variance) = if s + 1 == t {
        (sched.delta_cond(t), sched.delta_tilde(t))
    } else {
        (cond_var, cond_var * sched.delta(s) / sched.delta(t))
    };
    let w_prior = cond_var / sched.delta(t);
    let w_obs = a * sched.delta(s) / sched.delta(t);
    let (c_x0, c_y, c_xt) = (
        e::<E>(w_prior * (1.0 - m_s)),
        e::<E>(w_prior * m_s - w_obs * b),
        e::<E>(w_obs),
    );
    let data = x0_hat
        .data()
        .iter()
        .zip(y.data())
        .zip(x_t.data())
        .map(|((&x0, &yv), &xt)| c_x0 * x0 + c_y * yv + c_xt * xt)
        .collect();
    Ok((Tensor::new(x_t.shape().to_vec(), data)?, variance))
}

/// `x0_hat = x_t - pred`: the prediction target equals `x_t - x0`.
pub fn x0_from_prediction<E: Element>(x_t: &Tensor<E>, pred: &Tensor<E>) -> Result<Tensor<E>> {
    expect_same("x0_from_prediction", x_t, pred)?;
    Ok(x_t.zip_map(pred, |a, b| a - b)?)
}

/// Result of a reverse step.
#[derive(Debug, Clone)]
pub struct ReverseStepOut<E: Element> {
    pub mean: Tensor<E>,
    pub variance: f64,
    /// `mean + sqrt(variance) z`, with `z = 0` in deterministic mode.
    pub sample: Tensor<E>,
}

fn add_noise<E: Element>(mean: &Tensor<E>, variance: f64, rng: &mut Rng, deterministic: bool) -> Tensor<E> {
    if deterministic || variance == 0.0 {
        return mean.clone();
    }
    let sd = variance.sqrt();
    let data = mean.data().iter().map(|&m| m + e::<E>(sd * rng.normal())).collect();
    Tensor::new(mean.shape().to_vec(), data).expect("shape preserved")
}

/// One reverse step `t -> t - 1` from a network prediction.
pub fn bridge_reverse_step<E: Element>(
    x_t: &Tensor<E>,
    pred: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<ReverseStepOut<E>> {
    sched.check_step(t)?;
    bridge_reverse_step_to(x_t, pred, y, t, t - 1, sched, rng, deterministic)
}

/// Reverse step `t -> s` for strided sampling.
#[allow(clippy::too_many_arguments)]
pub fn bridge_reverse_step_to<E: Element>(
    x_t: &Tensor<E>,
    pred: &Tensor<E>,
    y: &Tensor<E>,
    t: usize,
    s: usize,
    sched: &BridgeSchedule,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<ReverseStepOut<E>> {
    let x0_hat = x0_from_prediction(x_t, pred)?;
    let (mean, variance) = bridge_posterior_between(x_t, &x0_hat, y, t, s, sched)?;
    let sample = add_noise(&mean, variance, rng, deterministic);
    Ok(ReverseStepOut { mean, variance, sample })
}

/// Draws for one bridge training step.
#[derive(Debug, Clone)]
pub struct BridgeBatch<E: Element> {
    pub x0: Tensor<E>,
    pub y: Tensor<E>,
    /// One step in `1..=T` per batch entry.
    pub t: Vec<usize>,
    pub eps: Tensor<E>,
}

impl<E: Element> BridgeBatch<E> {
    pub fn new(x0: Tensor<E>, y: Tensor<E>, t: Vec<usize>, eps: Tensor<E>) -> Result<Self> {
        expect_same("bridge batch", &x0, &y)?;
        expect_same("bridge batch", &x0, &eps)?;
        if x0.rank() != 4 {
            return Err(Error::invalid(format!("bridge batch expects NCHW latents, got {:?}", x0.shape())));
        }
        if t.len() != batch_len(&x0) {
            return Err(Error::invalid(format!("{} steps for a batch of {}", t.len(), batch_len(&x0))));
        }
        Ok(BridgeBatch { x0, y, t, eps })
    }

    /// Draw `t` from `sampler` and standard normal `eps`.
    pub fn draw(
        x0: Tensor<E>,
        y: Tensor<E>,
        sampler: &mut TimestepSampler,
        rng: &mut Rng,
    ) -> Result<Self> {
        let t = (0..batch_len(&x0)).map(|_| sampler.next(rng)).collect();
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        Self::new(x0, y, t, eps)
    }

    pub fn x_t(&self, sched: &BridgeSchedule) -> Result<Tensor<E>> {
        bridge_forward_batch(&self.x0, &self.y, &self.t, &self.eps, sched)
    }

    /// Regression target `m_t (y - x0) + sqrt(delta_t) eps`.
    pub fn target(&self, sched: &BridgeSchedule) -> Tensor<E> {
        per_sample(&[&self.x0, &self.y, &self.eps], &self.t, |t, v, dst| {
            let (m, sd) = (e::<E>(sched.m(t)), e::<E>(sched.delta(t).sqrt()));
            for (i, o) in dst.iter_mut().enumerate() {
                *o = m * (v[1][i] - v[0][i]) + sd * v[2][i];
            }
        })
    }
}

fn check_cond_dims<E: Element>(cond: Option<Var<'_, E>>, latent: &Tensor<E>) -> Result<()> {
    if let Some(c) = cond {
        let (cs, ls) = (c.shape(), latent.shape());
        if cs.len() != 4 || cs[0] != ls[0] || cs[2] != ls[2] || cs[3] != ls[3] {
            return Err(Error::invalid(format!(
                "condition shape {cs:?} does not match latent {ls:?} in batch/spatial dims"
            )));
        }
    }
    Ok(())
}

/// Batch mean of `w_n * mean((target_n - pred_n)^2)`.
fn weighted_mse<'g, E: Element>(
    g: &'g Graph<E>,
    target: Tensor<E>,
    pred: Var<'g, E>,
    weights: &[f64],
) -> Result<Var<'g, E>> {
    let diff = g.constant(target).sub(pred)?;
    let sq = diff.square()?;
    if weights.iter().all(|&w| w == 1.0) {
        return Ok(sq.mean()?);
    }
    let shape = sq.shape();
    let chunk = shape.iter().skip(1).product::<usize>();
    let mask: Vec<E> = weights.iter().flat_map(|&w| std::iter::repeat_n(e::<E>(w), chunk)).collect();
    Ok(sq.mul(g.constant(Tensor::new(shape, mask)?))?.mean()?)
}

/// Bridge objective on a drawn batch. Differentiable through `model` and `cond`.
pub fn bridge_loss<'g, E: Element, P: NoisePredictor<'g, E> + ?Sized>(
    model: &P,
    g: &'g Graph<E>,
    batch: &BridgeBatch<E>,
    cond: Option<Var<'g, E>>,
    sched: &BridgeSchedule,
    weighting: Weighting,
) -> Result<Var<'g, E>> {
    check_cond_dims(cond, &batch.x0)?;
    for &t in &batch.t {
        sched.check_step(t)?;
    }
    let x_t = g.constant(batch.x_t(sched)?);
    let pred = model.predict(x_t, cond, &batch.t)?;
    let weights: Vec<f64> = batch
        .t
        .iter()
        .map(|&t| match weighting {
            Weighting::Simplified => 1.0,
            Weighting::Elbo => sched.c_eps(t),
        })
        .collect();
    weighted_mse(g, batch.target(sched), pred, &weights)
}

/// Progress report for sampling loops.
#[derive(Debug, Clone, Copy)]
pub struct SampleProgress {
    pub step: usize,
    pub total: usize,
    pub t: usize,
}

fn predict_tensor<E: Element, P>(model: &P, x_t: &Tensor<E>, cond: Option<&Tensor<E>>, t: usize) -> Result<Tensor<E>>
where
    P: for<'g> NoisePredictor<'g, E> + ?Sized,
{
    let g = Graph::new();
    let xv = g.constant(x_t.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let steps = vec![t; batch_len(x_t)];
    let pred = model.predict(xv, cv, &steps)?.value();
    expect_same("prediction", x_t, &pred)?;
    Ok(pred)
}

fn strided_steps(horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || horizon % stride != 0 {
        return Err(Error::invalid(format!("stride {stride} does not divide T = {horizon}")));
    }
    Ok((1..=horizon / stride).rev().map(|k| k * stride).collect())
}

/// Translate `y` by running the reverse bridge from `x_T = y` at steps
/// `T, T - stride, ..., stride`.
#[allow(clippy::too_many_arguments)]
pub fn bridge_sample_loop<E: Element, P>(
    model: &P,
    y: &Tensor<E>,
    cond: Option<&Tensor<E>>,
    sched: &BridgeSchedule,
    stride: usize,
    rng: &mut Rng,
    deterministic: bool,
    mut progress: impl FnMut(SampleProgress),
) -> Result<Tensor<E>>
where
    P: for<'g> NoisePredictor<'g, E> + ?Sized,
{
    let steps = strided_steps(sched.horizon(), stride)?;
    let mut x = y.clone();
    for (i, &t) in steps.iter().enumerate() {
        let pred = predict_tensor(model, &x, cond, t)?;
        x = bridge_reverse_step_to(&x, &pred, y, t, t - stride, sched, rng, deterministic)?.sample;
        progress(SampleProgress { step: i + 1, total: steps.len(), t });
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Gaussian conditional baseline
// ---------------------------------------------------------------------------

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, `0 <= t <= T`.
pub fn gaussian_forward_sample<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    gsched: &GaussianSchedule,
) -> Result<Tensor<E>> {
    if t > gsched.horizon() {
        return Err(Error::TimestepOutOfRange { t, horizon: gsched.horizon() });
    }
    expect_same("gaussian_forward_sample", x0, eps)?;
    let ab = gsched.alpha_bar(t);
    Ok(x0.lin_comb(e(ab.sqrt()), eps, e((1.0 - ab).sqrt()))?)
}

/// Ancestral step `t -> t - 1` with variance `beta_t`; noise-free at `t = 1`.
pub fn gaussian_reverse_step<E: Element>(
    x_t: &Tensor<E>,
    eps_pred: &Tensor<E>,
    t: usize,
    gsched: &GaussianSchedule,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<ReverseStepOut<E>> {
    gsched.check_step(t)?;
    expect_same("gaussian_reverse_step", x_t, eps_pred)?;
    let beta = gsched.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - gsched.alpha_bar(t)).sqrt();
    let mean = x_t.lin_comb(e(inv_sqrt_alpha), eps_pred, e(-inv_sqrt_alpha * eps_coef))?;
    let variance = if t == 1 { 0.0 } else { beta };
    let sample = add_noise(&mean, variance, rng, deterministic);
    Ok(ReverseStepOut { mean, variance, sample })
}

/// Reverse step `t -> s` through the predicted `x0`; equals
/// [`gaussian_reverse_step`] in mean and variance when `s = t - 1`.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_reverse_step_to<E: Element>(
    x_t: &Tensor<E>,
    eps_pred: &Tensor<E>,
    t: usize,
    s: usize,
    gsched: &GaussianSchedule,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<ReverseStepOut<E>> {
    gsched.check_step(t)?;
    if s >= t {
        return Err(Error::invalid(format!("reverse target step {s} must precede {t}")));
    }
    expect_same("gaussian_reverse_step_to", x_t, eps_pred)?;
    let (ab_t, ab_s) = (gsched.alpha_bar(t), gsched.alpha_bar(s));
    let alpha_ts = ab_t / ab_s;
    let beta_ts = 1.0 - alpha_ts;
    // mean = c0 * x0_hat + c1 * x_t with x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
    let c0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
    let c1 = alpha_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    let coef_x = c0 / ab_t.sqrt() + c1;
    let coef_eps = -c0 * (1.0 - ab_t).sqrt() / ab_t.sqrt();
    let mean = x_t.lin_comb(e(coef_x), eps_pred, e(coef_eps))?;
    let variance = if s == 0 { 0.0 } else { beta_ts };
    let sample = add_noise(&mean, variance, rng, deterministic);
    Ok(ReverseStepOut { mean, variance, sample })
}

/// Generate from pure noise with the conditional Gaussian model.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_sample_loop<E: Element, P>(
    model: &P,
    shape: &[usize],
    cond: Option<&Tensor<E>>,
    gsched: &GaussianSchedule,
    stride: usize,
    rng: &mut Rng,
    deterministic: bool,
    mut progress: impl FnMut(SampleProgress),
) -> Result<Tensor<E>>
where
    P: for<'g> NoisePredictor<'g, E> + ?Sized,
{
    let steps = strided_steps(gsched.horizon(), stride)?;
    let mut x = Tensor::randn(shape.to_vec(), rng);
    for (i, &t) in steps.iter().enumerate() {
        let eps = predict_tensor(model, &x, cond, t)?;
        let out = if stride == 1 {
            gaussian_reverse_step(&x, &eps, t, gsched, rng, deterministic)?
        } else {
            gaussian_reverse_step_to(&x, &eps, t, t - stride, gsched, rng, deterministic)?
        };
        x = out.sample;
        progress(SampleProgress { step: i + 1, total: steps.len(), t });
    }
    Ok(x)
}

/// Draws for one Gaussian training step.
#[derive(Debug, Clone)]
pub struct GaussianBatch<E: Element> {
    pub x0: Tensor<E>,
    pub t: Vec<usize>,
    pub eps: Tensor<E>,
}

impl<E: Element> GaussianBatch<E> {
    pub fn draw(x0: Tensor<E>, sampler: &mut TimestepSampler, rng: &mut Rng) -> Self {
        let t = (0..batch_len(&x0)).map(|_| sampler.next(rng)).collect();
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        GaussianBatch { x0, t, eps }
    }

    pub fn x_t(&self, gsched: &GaussianSchedule) -> Tensor<E> {
        per_sample(&[&self.x0, &self.eps], &self.t, |t, v, dst| {
            let ab = gsched.alpha_bar(t);
            let (a, b) = (e::<E>(ab.sqrt()), e::<E>((1.0 - ab).sqrt()));
            for (i, o) in dst.iter_mut().enumerate() {
                *o = a * v[0][i] + b * v[1][i];
            }
        })
    }
}

/// Epsilon-prediction MSE for the Gaussian baseline.
pub fn gaussian_loss<'g, E: Element, P: NoisePredictor<'g, E> + ?Sized>(
    model: &P,
    g: &'g Graph<E>,
    batch: &GaussianBatch<E>,
    cond: Option<Var<'g, E>>,
    gsched: &GaussianSchedule,
) -> Result<Var<'g, E>> {
    check_cond_dims(cond, &batch.x0)?;
    for &t in &batch.t {
        gsched.check_step(t)?;
    }
    let x_t = g.constant(batch.x_t(gsched));
    let pred = model.predict(x_t, cond, &batch.t)?;
    weighted_mse(g, batch.eps.clone(), pred, &vec![1.0; batch.t.len()])
}
