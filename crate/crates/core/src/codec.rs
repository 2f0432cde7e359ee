//! Pixel <-> latent mappings with 4x per-axis spatial compression.

use bbdm_tensor::{Element, Graph, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};

pub const BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    #[default]
    SpaceToDepth,
    TinyAe,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::SpaceToDepth => "space_to_depth",
            CodecKind::TinyAe => "tiny_ae",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec<E: Element> {
    pub kind: CodecKind,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub ae_params: Option<ParamStore<E>>,
}

impl<E: Element> Codec<E> {
    pub fn identity(image_channels: usize) -> Self {
        Codec { kind: CodecKind::Identity, image_channels, latent_channels: image_channels, ae_params: None }
    }

    pub fn space_to_depth(image_channels: usize) -> Self {
        Codec {
            kind: CodecKind::SpaceToDepth,
            image_channels,
            latent_channels: image_channels * BLOCK * BLOCK,
            ae_params: None,
        }
    }

    /// Untrained autoencoder with the given latent width.
    pub fn tiny_ae(image_channels: usize, latent_channels: usize, rng: &Rng) -> Result<Self> {
        Ok(Codec {
            kind: CodecKind::TinyAe,
            image_channels,
            latent_channels,
            ae_params: Some(ae_init(image_channels, latent_channels, rng)?),
        })
    }

    pub fn block(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 1,
            _ => BLOCK,
        }
    }

    fn ae(&self) -> Result<&ParamStore<E>> {
        self.ae_params.as_ref().ok_or_else(|| Error::invalid("tiny_ae codec has no parameters"))
    }

    pub fn encode(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        check_image(image, self.image_channels, self.block())?;
        match self.kind {
            CodecKind::Identity => Ok(image.clone()),
            CodecKind::SpaceToDepth => space_to_depth(image, BLOCK),
            CodecKind::TinyAe => {
                let g = Graph::new();
                let p = self.ae()?.bind(&g, false);
                Ok(ae_encode(&p, g.constant(image.clone()))?.value())
            }
        }
    }

    pub fn decode(&self, latent: &Tensor<E>) -> Result<Tensor<E>> {
        let s = latent.shape();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(Error::invalid(format!(
                "{} decode expects (N, {}, h, w), got {s:?}",
                self.kind.name(),
                self.latent_channels
            )));
        }
        match self.kind {
            CodecKind::Identity => Ok(latent.clone()),
            CodecKind::SpaceToDepth => depth_to_space(latent, BLOCK),
            CodecKind::TinyAe => {
                let g = Graph::new();
                let p = self.ae()?.bind(&g, false);
                Ok(ae_decode(&p, g.constant(latent.clone()))?.value())
            }
        }
    }

    /// Latent shape for an image shape.
    pub fn latent_shape(&self, image_shape: &[usize]) -> Result<Vec<usize>> {
        if image_shape.len() != 4 {
            return Err(Error::invalid(format!("expected NCHW, got {image_shape:?}")));
        }
        let b = self.block();
        if image_shape[2] % b != 0 || image_shape[3] % b != 0 {
            return Err(Error::invalid(format!("{}x{} not divisible by {b}", image_shape[2], image_shape[3])));
        }
        Ok(vec![image_shape[0], self.latent_channels, image_shape[2] / b, image_shape[3] / b])
    }
}

fn check_image<E: Element>(image: &Tensor<E>, channels: usize, block: usize) -> Result<()> {
    let s = image.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::invalid(format!("expected (N, {channels}, H, W), got {s:?}")));
    }
    if s[2] % block != 0 || s[3] % block != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::invalid(format!("image {}x{} not divisible by block {block}", s[2], s[3])));
    }
    Ok(())
}

/// `(N, C, H, W) -> (N, C*b*b, H/b, W/b)`. Output channel `c*b*b + dy*b + dx`
/// holds pixel `(y*b + dy, x*b + dx)` of input channel `c`.
pub fn space_to_depth<E: Element>(image: &Tensor<E>, b: usize) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.len() != 4 || b == 0 || s[2] % b != 0 || s[3] % b != 0 {
        return Err(Error::invalid(format!("space_to_depth: {s:?} not divisible by {b}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / b, w / b);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..b {
                for dx in 0..b {
                    for y in 0..oh {
                        let row = ((ni * c + ci) * h + y * b + dy) * w;
                        out.extend((0..ow).map(|x| src[row + x * b + dx]));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, c * b * b, oh, ow], out)?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<E: Element>(latent: &Tensor<E>, b: usize) -> Result<Tensor<E>> {
    let s = latent.shape();
    if s.len() != 4 || b == 0 || s[1] % (b * b) != 0 {
        return Err(Error::invalid(format!("depth_to_space: {s:?} channels not divisible by {}", b * b)));
    }
    let (n, cb, oh, ow) = (s[0], s[1], s[2], s[3]);
    let (c, h, w) = (cb / (b * b), oh * b, ow * b);
    let src = latent.data();
    let mut out = vec![E::zero(); src.len()];
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..b {
                for dx in 0..b {
                    for y in 0..oh {
                        let row = ((ni * c + ci) * h + y * b + dy) * w;
                        for x in 0..ow {
                            out[row + x * b + dx] = src[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, c, h, w], out)?)
}

const AE_WIDTHS: [usize; 2] = [16, 32];

fn ae_init<E: Element>(image_channels: usize, latent_channels: usize, rng: &Rng) -> Result<ParamStore<E>> {
    if image_channels == 0 || latent_channels == 0 {
        return Err(Error::invalid("autoencoder channel counts must be positive"));
    }
    let [w1, w2] = AE_WIDTHS;
    let mut p = ParamStore::new();
    let layers = [
        ("enc1", image_channels, w1, 3),
        ("enc2", w1, w2, 3),
        ("enc3", w2, latent_channels, 1),
        ("dec1", latent_channels, w2, 1),
        ("dec2", w2, w1, 3),
        ("dec3", w1, image_channels, 3),
    ];
    for (name, i, o, k) in layers {
        p.insert_kaiming(rng, &format!("{name}.weight"), vec![o, i, k, k], i * k * k)?;
        p.insert(format!("{name}.bias"), Tensor::zeros(vec![o]))?;
    }
    Ok(p)
}

fn conv<'g, E: Element>(p: &Bound<'g, E>, x: Var<'g, E>, name: &str) -> Result<Var<'g, E>> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = if w.shape()[2] == 3 { 1 } else { 0 };
    Ok(x.conv2d(w, Some(p.get(&format!("{name}.bias"))?), pad)?)
}

fn ae_encode<'g, E: Element>(p: &Bound<'g, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
    let h = conv(p, x, "enc1")?.silu()?.avg_pool2()?;
    let h = conv(p, h, "enc2")?.silu()?.avg_pool2()?;
    conv(p, h, "enc3")
}

fn ae_decode<'g, E: Element>(p: &Bound<'g, E>, z: Var<'g, E>) -> Result<Var<'g, E>> {
    let h = conv(p, z, "dec1")?.silu()?.upsample2()?;
    let h = conv(p, h, "dec2")?.silu()?.upsample2()?;
    conv(p, h, "dec3")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub latent_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            latent_channels: 16,
            steps: 2000,
            batch_size: 8,
            optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
        }
    }
}

/// Result of autoencoder training.
#[derive(Debug, Clone)]
pub struct AeTrainOutcome<E: Element> {
    pub codec: Codec<E>,
    /// Batch reconstruction MSE of the last step.
    pub final_loss: f64,
}

/// Fit a convolutional autoencoder with MSE reconstruction loss on
/// `images`, each `(C, H, W)`.
pub fn train_tiny_ae<E: Element>(images: &[Tensor<E>], config: &AeTrainConfig, rng: &Rng) -> Result<AeTrainOutcome<E>> {
    let first = images.first().ok_or_else(|| Error::Dataset("empty autoencoder dataset".into()))?;
    if first.rank() != 3 {
        return Err(Error::invalid(format!("expected (C, H, W) images, got {:?}", first.shape())));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let channels = first.shape()[0];
    let mut codec = Codec::tiny_ae(channels, config.latent_channels, &rng.fork("init"))?;
    let mut params = codec.ae_params.take().expect("just initialised");
    let mut opt = Adam::new(config.optimizer)?;
    let mut draw = rng.fork("batches");
    let mut final_loss = f64::NAN;
    let mut g = Graph::new();
    for _ in 0..config.steps {
        let batch: Vec<Tensor<E>> =
            (0..config.batch_size).map(|_| images[draw.below(images.len() as u64) as usize].clone()).collect();
        let x = Tensor::stack(&batch)?;
        check_image(&x, channels, BLOCK)?;
        g.reset();
        let bound = params.bind(&g, true);
        let xv = g.constant(x);
        let recon = ae_decode(&bound, ae_encode(&bound, xv)?)?;
        let loss = recon.sub(xv)?.square()?.mean()?;
        final_loss = loss.value().item().as_f64();
        let grads = g.backward(loss)?;
        opt.step(&mut params, &bound, &grads)?;
    }
    codec.ae_params = Some(params);
    Ok(AeTrainOutcome { codec, final_loss })
}
