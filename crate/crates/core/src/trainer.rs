//! Training loop with best-validation selection, plus the translation
//! pipeline for the bridge models and the Gaussian baseline.

use std::fmt::Write as _;

use bbdm_tensor::{Graph, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CodecMeta, ValPoint};
use crate::codec::{train_tiny_ae, AeTrainConfig, Codec, CodecKind};
use crate::data::{hflip_augment, PairedSample};
use crate::denoiser::{BoundDenoiser, Denoiser, DenoiserConfig};
use crate::diffusion::{
    bridge_loss, bridge_sample_loop, gaussian_loss, gaussian_sample_loop, BridgeBatch, GaussianBatch,
    TimestepSampler, TimestepSampling, Weighting,
};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedule::{BridgeSchedule, GaussianSchedule};

/// Which model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Bridge with the encoded source image as an extra input.
    #[default]
    Cbbdm,
    /// Bridge without a condition.
    Bbdm,
    /// Noise-to-image diffusion conditioned on the source latent and encoded source.
    Gaussian,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cbbdm => "cbbdm",
            ModelKind::Bbdm => "bbdm",
            ModelKind::Gaussian => "gaussian",
        }
    }

    pub fn conditioned(self) -> bool {
        !matches!(self, ModelKind::Bbdm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub horizon: usize,
    pub weighting: Weighting,
    pub timestep_sampling: TimestepSampling,
    pub seed: u64,
    /// Validate every this many steps, and once more at the end.
    pub val_interval: usize,
    /// Use at most this many validation samples for the validation loss.
    pub val_limit: Option<usize>,
    pub hflip_p: f64,
    /// Exponential moving average of weights; off when `None`.
    pub ema_decay: Option<f64>,
    /// Gaussian baseline `(beta_1, beta_T)`; `None` scales `(1e-4, 0.02)` by `1000 / T`.
    pub gaussian_betas: Option<(f64, f64)>,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub cond_channels: usize,
    pub codec: CodecKind,
    pub autoencoder: AeTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Cbbdm,
            optimizer: AdamConfig::default(),
            batch_size: 1,
            epochs: 1,
            max_steps: None,
            horizon: 100,
            weighting: Weighting::Simplified,
            timestep_sampling: TimestepSampling::Uniform,
            seed: 0,
            val_interval: 500,
            val_limit: None,
            hflip_p: 0.5,
            ema_decay: None,
            gaussian_betas: None,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 64,
            groups: 8,
            cond_channels: 3,
            codec: CodecKind::SpaceToDepth,
            autoencoder: AeTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("train config: {m}")));
        if !(self.optimizer.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.horizon < 2 {
            return fail(format!("T must be at least 2, got {}", self.horizon));
        }
        if self.val_interval == 0 {
            return fail("val_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return fail(format!("hflip_p {} outside [0, 1]", self.hflip_p));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return fail(format!("ema_decay {d} outside [0, 1)"));
            }
        }
        if self.model.conditioned() && self.cond_channels == 0 {
            return fail("conditioned models need cond_channels > 0".into());
        }
        Ok(())
    }

    pub fn betas(&self) -> (f64, f64) {
        self.gaussian_betas.unwrap_or_else(|| {
            let s = 1000.0 / self.horizon as f64;
            (1e-4 * s, (0.02 * s).min(0.999))
        })
    }

    pub fn denoiser_config(&self, image_channels: usize, latent_channels: usize) -> DenoiserConfig {
        let (cond, source) = match self.model {
            ModelKind::Cbbdm => (self.cond_channels, image_channels),
            ModelKind::Bbdm => (0, 0),
            ModelKind::Gaussian => (latent_channels + self.cond_channels, image_channels),
        };
        DenoiserConfig {
            latent_channels,
            cond_channels: cond,
            source_channels: source,
            encoder_channels: self.cond_channels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            attention_level: None,
            time_embed_dim: self.time_embed_dim,
            groups: self.groups,
            horizon: self.horizon,
        }
    }
}

/// Pixels in `[0, 1]` to model range `[-1, 1]`.
pub fn to_model_range(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_range(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// A batch in model space.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// Target latent.
    pub x0: Tensor<f32>,
    /// Source latent.
    pub y: Tensor<f32>,
    /// Source pixels in `[-1, 1]`, `(N, C, H, W)`.
    pub source: Tensor<f32>,
}

/// Denoiser, codec and schedules for one model kind.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub kind: ModelKind,
    pub codec: Codec<f32>,
    pub denoiser: Denoiser<f32>,
    pub bridge: BridgeSchedule,
    pub gaussian: GaussianSchedule,
}

impl Pipeline {
    pub fn new(config: &TrainConfig, codec: Codec<f32>, denoiser: Denoiser<f32>) -> Result<Self> {
        let (b0, b1) = config.betas();
        if denoiser.config.latent_channels != codec.latent_channels {
            return Err(Error::invalid(format!(
                "denoiser expects {} latent channels, codec produces {}",
                denoiser.config.latent_channels, codec.latent_channels
            )));
        }
        Ok(Pipeline {
            kind: config.model,
            codec,
            denoiser,
            bridge: BridgeSchedule::new(config.horizon)?,
            gaussian: GaussianSchedule::new(config.horizon, b0, b1)?,
        })
    }

    /// Initial pipeline for `config` with a freshly initialised denoiser.
    pub fn init(config: &TrainConfig, codec: Codec<f32>) -> Result<Self> {
        config.validate()?;
        let dcfg = config.denoiser_config(codec.image_channels, codec.latent_channels);
        let denoiser = Denoiser::init(dcfg, &Rng::new(config.seed).fork("init"))?;
        Self::new(config, codec, denoiser)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let denoiser = Denoiser::from_params(ckpt.denoiser.clone(), ckpt.params.clone())?;
        let expected = ckpt.train.denoiser_config(ckpt.codec.image_channels, ckpt.codec.latent_channels);
        if expected != ckpt.denoiser {
            return Err(Error::Checkpoint("denoiser configuration disagrees with the training configuration".into()));
        }
        Self::new(&ckpt.train, ckpt.codec()?, denoiser)
    }

    /// Stack and encode pairs.
    pub fn encode(&self, samples: &[&PairedSample]) -> Result<EncodedBatch> {
        let src: Vec<Tensor<f32>> = samples.iter().map(|s| to_model_range(&s.source)).collect();
        let tgt: Vec<Tensor<f32>> = samples.iter().map(|s| to_model_range(&s.target)).collect();
        let source = Tensor::stack(&src)?;
        let target = Tensor::stack(&tgt)?;
        Ok(EncodedBatch { x0: self.codec.encode(&target)?, y: self.codec.encode(&source)?, source })
    }

    fn cond<'g>(&self, d: &BoundDenoiser<'_, 'g, f32>, g: &'g Graph<f32>, b: &EncodedBatch) -> Result<Option<Var<'g, f32>>> {
        let hw = (b.y.shape()[2], b.y.shape()[3]);
        match self.kind {
            ModelKind::Cbbdm => d.condition(Some(g.constant(b.source.clone())), None, hw),
            ModelKind::Bbdm => Ok(None),
            ModelKind::Gaussian => d.condition(Some(g.constant(b.source.clone())), Some(g.constant(b.y.clone())), hw),
        }
    }

    /// Training objective on `batch` with `(t, eps)` drawn from `sampler` and `rng`.
    pub fn loss<'g>(
        &self,
        d: &BoundDenoiser<'_, 'g, f32>,
        g: &'g Graph<f32>,
        batch: &EncodedBatch,
        weighting: Weighting,
        sampler: &mut TimestepSampler,
        rng: &mut Rng,
    ) -> Result<Var<'g, f32>> {
        let cond = self.cond(d, g, batch)?;
        match self.kind {
            ModelKind::Cbbdm | ModelKind::Bbdm => {
                let draw = BridgeBatch::draw(batch.x0.clone(), batch.y.clone(), sampler, rng)?;
                bridge_loss(d, g, &draw, cond, &self.bridge, weighting)
            }
            ModelKind::Gaussian => {
                let draw = GaussianBatch::draw(batch.x0.clone(), sampler, rng);
                gaussian_loss(d, g, &draw, cond, &self.gaussian)
            }
        }
    }

    /// Translate source images `(C, H, W)` in `[0, 1]`.
    pub fn translate(
        &self,
        sources: &[Tensor<f32>],
        stride: usize,
        deterministic: bool,
        rng: &Rng,
        mut progress: impl FnMut(usize, usize),
    ) -> Result<Vec<Tensor<f32>>> {
        const CHUNK: usize = 8;
        let mut out = Vec::with_capacity(sources.len());
        let chunks = sources.len().div_ceil(CHUNK);
        for (ci, chunk) in sources.chunks(CHUNK).enumerate() {
            let mut r = rng.fork_indexed("translate", ci as u64);
            let source = Tensor::stack(&chunk.iter().map(to_model_range).collect::<Vec<_>>())?;
            let y = self.codec.encode(&source)?;
            let hw = (y.shape()[2], y.shape()[3]);
            let latent = match self.kind {
                ModelKind::Cbbdm | ModelKind::Bbdm => {
                    let cond = match self.kind {
                        ModelKind::Cbbdm => self.denoiser.condition(Some(&source), None, hw)?,
                        _ => None,
                    };
                    bridge_sample_loop(&self.denoiser, &y, cond.as_ref(), &self.bridge, stride, &mut r, deterministic, |_| {})?
                }
                ModelKind::Gaussian => {
                    let cond = self.denoiser.condition(Some(&source), Some(&y), hw)?;
                    gaussian_sample_loop(&self.denoiser, y.shape(), cond.as_ref(), &self.gaussian, stride, &mut r, deterministic, |_| {})?
                }
            };
            out.extend(self.codec.decode(&latent)?.unstack().iter().map(from_model_range));
            progress(ci + 1, chunks);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, config: &TrainConfig, step: usize, val_history: Vec<ValPoint>) -> Checkpoint {
        Checkpoint {
            train: config.clone(),
            denoiser: self.denoiser.config.clone(),
            codec: CodecMeta {
                kind: self.codec.kind,
                image_channels: self.codec.image_channels,
                latent_channels: self.codec.latent_channels,
            },
            step,
            val_history,
            params: self.denoiser.params.clone(),
            codec_params: self.codec.ae_params.clone(),
        }
    }
}

/// Build the codec a config asks for, training the autoencoder on the
/// training targets when needed.
pub fn build_codec(config: &TrainConfig, train: &[PairedSample]) -> Result<Codec<f32>> {
    let channels = train.first().ok_or_else(|| Error::Dataset("empty training set".into()))?.target.shape()[0];
    Ok(match config.codec {
        CodecKind::Identity => Codec::identity(channels),
        CodecKind::SpaceToDepth => Codec::space_to_depth(channels),
        CodecKind::TinyAe => {
            let images: Vec<Tensor<f32>> = train.iter().map(|s| to_model_range(&s.target)).collect();
            train_tiny_ae(&images, &config.autoencoder, &Rng::new(config.seed).fork("autoencoder"))?.codec
        }
    })
}

/// Index of the first minimum; the selection rule for checkpoints.
pub fn best_index(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_loss,val_loss\n");
    for p in points {
        let val = p.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.8},{val}", p.step, p.train_loss);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the validation point with the lowest loss.
    pub best: Checkpoint,
    /// Parameters after the last successful step.
    pub last: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
    /// Fingerprint of the validation inputs at each validation, identical
    /// across the run because validation is never augmented.
    pub val_digests: Vec<u64>,
}

/// Progress events from [`train`].
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent {
    Step { step: usize, loss: f64 },
    Validation { step: usize, loss: f64 },
}

fn digest(t: &Tensor<f32>, mut h: u64) -> u64 {
    for v in t.data() {
        h = (h ^ u64::from(v.to_bits())).wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn assert_disjoint(train: &[PairedSample], val: &[PairedSample]) -> Result<()> {
    let max_train = train.iter().map(|s| s.longitude).fold(f64::NEG_INFINITY, f64::max);
    let min_val = val.iter().map(|s| s.longitude).fold(f64::INFINITY, f64::min);
    if !(max_train < min_val) {
        return Err(Error::Dataset(format!(
            "train and validation longitudes overlap (train max {max_train}, val min {min_val})"
        )));
    }
    Ok(())
}

const VAL_BATCH: usize = 8;

/// Mean validation objective with `(t, eps)` drawn from a fixed stream.
pub fn validation_loss(pipe: &Pipeline, config: &TrainConfig, val: &[PairedSample]) -> Result<(f64, u64)> {
    let mut rng = Rng::new(config.seed).fork("validation");
    // Fixed strata so every evaluation sees the same steps.
    let mut sampler = TimestepSampler::new(TimestepSampling::Stratified, config.horizon);
    let (mut total, mut count, mut h) = (0.0, 0usize, 0xCBF2_9CE4_8422_2325u64);
    let mut g = Graph::new();
    for chunk in val.chunks(VAL_BATCH) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let batch = pipe.encode(&refs)?;
        h = digest(&batch.source, digest(&batch.x0, h));
        g.reset();
        let d = pipe.denoiser.bind(&g, false);
        let loss = pipe.loss(&d, &g, &batch, config.weighting, &mut sampler, &mut rng)?;
        total += f64::from(loss.value().item()) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((total / count as f64, h))
}

fn non_finite_reason(e: &Error) -> Option<String> {
    match e {
        Error::Diverged { reason, .. } => Some(reason.clone()),
        Error::Tensor(bbdm_tensor::TensorError::NonFinite { op }) => Some(format!("non-finite value in {op}")),
        _ => None,
    }
}

/// Train `pipe` on `train`, validating on `val`.
pub fn train(
    config: &TrainConfig,
    mut pipe: Pipeline,
    train: &[PairedSample],
    val: &[PairedSample],
    mut on_event: impl FnMut(TrainEvent),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    assert_disjoint(train, val)?;
    let val = &val[..config.val_limit.unwrap_or(val.len()).clamp(1, val.len())];
    let root = Rng::new(config.seed);
    let mut opt = Adam::new(config.optimizer)?;
    let mut sampler = TimestepSampler::new(config.timestep_sampling, config.horizon);
    let mut ema: Option<ParamStore<f32>> = config.ema_decay.map(|_| pipe.denoiser.params.clone());
    let mut curve = Vec::new();
    let mut history = Vec::new();
    let mut digests = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut diverged = None;
    let mut step = 0usize;
    let mut recent = Vec::new();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut g = Graph::new();

    let mut validate = |pipe: &Pipeline, ema: &Option<ParamStore<f32>>, step: usize, history: &mut Vec<ValPoint>| -> Result<f64> {
        let eval_pipe;
        let p = match ema {
            Some(shadow) => {
                let mut copy = pipe.clone();
                copy.denoiser.params = shadow.clone();
                eval_pipe = copy;
                &eval_pipe
            }
            None => pipe,
        };
        let (loss, h) = validation_loss(p, config, val)?;
        digests.push(h);
        history.push(ValPoint { step, loss });
        if best_index(&history.iter().map(|v| v.loss).collect::<Vec<_>>()) == Some(history.len() - 1) {
            best = Some(p.checkpoint(config, step, history.clone()));
        }
        Ok(loss)
    };

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork_indexed("epoch", epoch as u64).shuffle(&mut order);
        for idx in order.chunks(config.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let mut r = root.fork_indexed("step", step as u64);
            let samples: Vec<PairedSample> = idx.iter().map(|&i| hflip_augment(&train[i], &mut r, config.hflip_p)).collect();
            let batch = pipe.encode(&samples.iter().collect::<Vec<_>>())?;
            g.reset();
            let d = pipe.denoiser.bind(&g, true);
            let result = pipe
                .loss(&d, &g, &batch, config.weighting, &mut sampler, &mut r)
                .and_then(|loss| {
                    let value = f64::from(loss.value().item());
                    let grads = g.backward(loss)?;
                    Ok((value, grads))
                });
            let (loss, grads) = match result {
                Ok(v) => v,
                Err(e) => match non_finite_reason(&e) {
                    Some(reason) => {
                        diverged = Some(format!("step {}: {reason}", step + 1));
                        break 'epochs;
                    }
                    None => return Err(e),
                },
            };
            let bound = d.params().clone();
            drop(d);
            if let Err(e) = opt.step(&mut pipe.denoiser.params, &bound, &grads) {
                match non_finite_reason(&e) {
                    Some(reason) => {
                        diverged = Some(format!("step {}: {reason}", step + 1));
                        break 'epochs;
                    }
                    None => return Err(e),
                }
            }
            if let (Some(shadow), Some(decay)) = (ema.as_mut(), config.ema_decay) {
                for ((_, s), (_, p)) in shadow.iter_mut().zip(pipe.denoiser.params.iter()) {
                    let dk = decay as f32;
                    *s = s.zip_map(p, |a, b| dk * a + (1.0 - dk) * b)?;
                }
            }
            step += 1;
            recent.push(loss);
            on_event(TrainEvent::Step { step, loss });
            let mut point = CurvePoint { step, train_loss: loss, val_loss: None };
            if step % config.val_interval == 0 {
                match validate(&pipe, &ema, step, &mut history) {
                    Ok(v) => {
                        on_event(TrainEvent::Validation { step, loss: v });
                        point.val_loss = Some(v);
                    }
                    Err(e) => match non_finite_reason(&e) {
                        Some(reason) => {
                            curve.push(point);
                            diverged = Some(format!("validation at step {step}: {reason}"));
                            break 'epochs;
                        }
                        None => return Err(e),
                    },
                }
            }
            curve.push(point);
        }
    }
    // A diverged run keeps its last finite parameters without a final validation.
    if diverged.is_none() && history.last().is_none_or(|v| v.step != step) {
        let v = validate(&pipe, &ema, step, &mut history)?;
        on_event(TrainEvent::Validation { step, loss: v });
        match curve.last_mut() {
            Some(p) if p.step == step => p.val_loss = Some(v),
            _ => curve.push(CurvePoint { step, train_loss: f64::NAN, val_loss: Some(v) }),
        }
    }
    let mut last_pipe = pipe.clone();
    if let Some(shadow) = ema {
        last_pipe.denoiser.params = shadow;
    }
    let last = last_pipe.checkpoint(config, step, history.clone());
    let mut best = best.unwrap_or_else(|| last.clone());
    best.val_history = history;
    Ok(TrainOutcome { best, last, curve, steps: step, diverged, val_digests: digests })
}
