//! Conditional UNet noise predictor and the pixel-space condition encoder.

use bbdm_tensor::{attention, Element, Graph, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channels of `x_t` and of the prediction.
    pub latent_channels: usize,
    /// Extra channels concatenated to `x_t` before the first convolution.
    pub cond_channels: usize,
    /// Input channels of the 1x1 condition encoder; 0 disables it.
    pub source_channels: usize,
    /// Output channels of the condition encoder, the last of the condition channels.
    pub encoder_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Level holding the single attention block; `None` means the lowest resolution.
    pub attention_level: Option<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Largest timestep the model is asked about.
    pub horizon: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 48,
            cond_channels: 3,
            source_channels: 3,
            encoder_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attention_level: None,
            time_embed_dim: 64,
            groups: 8,
            horizon: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("denoiser config: {m}")));
        if self.latent_channels == 0 {
            return fail("latent_channels must be positive".into());
        }
        if self.groups == 0 || self.base_channels == 0 || self.base_channels % self.groups != 0 {
            return fail(format!("base_channels {} not divisible by groups {}", self.base_channels, self.groups));
        }
        if self.channel_mults.len() < 2 || self.channel_mults.contains(&0) {
            return fail(format!("need at least two positive channel multipliers, got {:?}", self.channel_mults));
        }
        if self.attn_level() >= self.channel_mults.len() {
            return fail(format!("attention level {} beyond {} levels", self.attn_level(), self.channel_mults.len()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        if self.source_channels > 0 && (self.encoder_channels == 0 || self.encoder_channels > self.cond_channels) {
            return fail(format!(
                "condition encoder width {} must lie in 1..={} (cond_channels)",
                self.encoder_channels, self.cond_channels
            ));
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn attn_level(&self) -> usize {
        self.attention_level.unwrap_or(self.channel_mults.len() - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial dims must survive `levels - 1` halvings.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let e = self.time_embed_dim;
        let conv3 = |i: usize, o: usize| 9 * i * o + o;
        let conv1 = |i: usize, o: usize| i * o + o;
        let res = |i: usize, o: usize| {
            2 * i + conv3(i, o) + (e * o + o) + 2 * o + conv3(o, o) + if i != o { conv1(i, o) } else { 0 }
        };
        let attn = |c: usize| 2 * c + 4 * conv1(c, c);
        let levels = self.levels();
        let mut n = 2 * (e * e + e) + conv3(self.latent_channels + self.cond_channels, self.width(0));
        if self.source_channels > 0 {
            n += conv1(self.source_channels, self.encoder_channels);
        }
        let mut c = self.width(0);
        for l in 0..levels {
            n += res(c, self.width(l));
            c = self.width(l);
            if l == self.attn_level() && l + 1 < levels {
                n += attn(c);
            }
        }
        n += 2 * res(c, c);
        if self.attn_level() + 1 == levels {
            n += attn(c);
        }
        for l in (0..levels).rev() {
            n += res(c + self.width(l), self.width(l));
            c = self.width(l);
        }
        n + 2 * c + conv3(c, self.latent_channels)
    }
}

/// Sinusoidal embedding of step `t`: `[sin(t f_i)..., cos(t f_i)...]` with
/// `dim / 2` frequencies spaced geometrically from 1 down to 1e-4.
pub fn time_embed<E: Element>(t: usize, dim: usize, horizon: usize) -> Result<Tensor<E>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dim must be even and positive, got {dim}")));
    }
    if t > horizon {
        return Err(Error::TimestepOutOfRange { t, horizon });
    }
    Ok(Tensor::new(vec![dim], sinusoid(t, dim))?)
}

fn sinusoid<E: Element>(t: usize, dim: usize) -> Vec<E> {
    let half = dim / 2;
    let freq = |i: usize| if half == 1 { 1.0 } else { 1e-4f64.powf(i as f64 / (half - 1) as f64) };
    let sin = (0..half).map(|i| (t as f64 * freq(i)).sin());
    let cos = (0..half).map(|i| (t as f64 * freq(i)).cos());
    sin.chain(cos).map(E::from_f64_lossy).collect()
}

fn time_embed_batch<E: Element>(t: &[usize], dim: usize, horizon: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(t.len() * dim);
    for &s in t {
        data.extend(time_embed::<E>(s, dim, horizon)?.into_vec());
    }
    Ok(Tensor::new(vec![t.len(), dim], data)?)
}

/// 1x1 condition-encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoderParams<E: Element> {
    /// `(cond_channels, source_channels, 1, 1)`.
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Bilinearly resize `source` (NCHW) to the latent grid, then apply the 1x1 conv.
pub fn encode_condition<E: Element>(
    source: &Tensor<E>,
    latent_h: usize,
    latent_w: usize,
    params: &ConditionEncoderParams<E>,
) -> Result<Tensor<E>> {
    let g = Graph::new();
    let out = encode_condition_var(
        g.constant(source.clone()),
        latent_h,
        latent_w,
        g.constant(params.weight.clone()),
        g.constant(params.bias.clone()),
    )?;
    Ok(out.value())
}

pub fn encode_condition_var<'g, E: Element>(
    source: Var<'g, E>,
    latent_h: usize,
    latent_w: usize,
    weight: Var<'g, E>,
    bias: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::invalid(format!("condition encoder kernel must be 1x1, got {ws:?}")));
    }
    if latent_h == 0 || latent_w == 0 {
        return Err(Error::invalid("condition target dims must be positive"));
    }
    Ok(source.bilinear_resize(latent_h, latent_w)?.conv2d(weight, Some(bias), 0)?)
}

/// UNet parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<E: Element> {
    pub config: DenoiserConfig,
    pub params: ParamStore<E>,
}

impl<E: Element> Denoiser<E> {
    /// Kaiming fan-in init, unit norm scales, zero biases and a zero output conv.
    pub fn init(config: DenoiserConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let e = config.time_embed_dim;
        let zeros = |n: usize| Tensor::<E>::zeros(vec![n]);
        let ones = |n: usize| Tensor::<E>::full(vec![n], E::one());
        let conv = |p: &mut ParamStore<E>, name: &str, i: usize, o: usize, k: usize| -> Result<()> {
            p.insert_kaiming(rng, &format!("{name}.weight"), vec![o, i, k, k], i * k * k)?;
            p.insert(format!("{name}.bias"), zeros(o))
        };
        let norm = |p: &mut ParamStore<E>, name: &str, c: usize| -> Result<()> {
            p.insert(format!("{name}.gamma"), ones(c))?;
            p.insert(format!("{name}.beta"), zeros(c))
        };
        let res = |p: &mut ParamStore<E>, name: &str, i: usize, o: usize| -> Result<()> {
            norm(p, &format!("{name}.norm1"), i)?;
            conv(p, &format!("{name}.conv1"), i, o, 3)?;
            p.insert_kaiming(rng, &format!("{name}.time.weight"), vec![o, e], e)?;
            p.insert(format!("{name}.time.bias"), zeros(o))?;
            norm(p, &format!("{name}.norm2"), o)?;
            conv(p, &format!("{name}.conv2"), o, o, 3)?;
            if i != o {
                conv(p, &format!("{name}.skip"), i, o, 1)?;
            }
            Ok(())
        };
        let attn = |p: &mut ParamStore<E>, name: &str, c: usize| -> Result<()> {
            norm(p, &format!("{name}.norm"), c)?;
            for proj in ["q", "k", "v", "proj"] {
                conv(p, &format!("{name}.{proj}"), c, c, 1)?;
            }
            Ok(())
        };

        for fc in ["time.fc1", "time.fc2"] {
            p.insert_kaiming(rng, &format!("{fc}.weight"), vec![e, e], e)?;
            p.insert(format!("{fc}.bias"), zeros(e))?;
        }
        if config.source_channels > 0 {
            conv(&mut p, "cond_enc", config.source_channels, config.encoder_channels, 1)?;
        }
        conv(&mut p, "conv_in", config.latent_channels + config.cond_channels, config.width(0), 3)?;
        let levels = config.levels();
        let mut c = config.width(0);
        for l in 0..levels {
            res(&mut p, &format!("down{l}.res"), c, config.width(l))?;
            c = config.width(l);
            if l == config.attn_level() && l + 1 < levels {
                attn(&mut p, &format!("down{l}.attn"), c)?;
            }
        }
        res(&mut p, "mid.res1", c, c)?;
        if config.attn_level() + 1 == levels {
            attn(&mut p, "mid.attn", c)?;
        }
        res(&mut p, "mid.res2", c, c)?;
        for l in (0..levels).rev() {
            res(&mut p, &format!("up{l}.res"), c + config.width(l), config.width(l))?;
            c = config.width(l);
        }
        norm(&mut p, "out.norm", c)?;
        p.insert("out.conv.weight", Tensor::zeros(vec![config.latent_channels, c, 3, 3]))?;
        p.insert("out.conv.bias", zeros(config.latent_channels))?;
        Ok(Denoiser { config, params: p })
    }

    /// Adopt existing parameters after checking them against the config layout.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<E>) -> Result<Self> {
        let reference = Denoiser::<E>::init(config.clone(), &Rng::new(0))?;
        if !reference.params.same_layout(&params) {
            return Err(Error::invalid("parameters do not match the denoiser configuration"));
        }
        if !params.is_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(Denoiser { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn condition_encoder(&self) -> Option<ConditionEncoderParams<E>> {
        Some(ConditionEncoderParams {
            weight: self.params.get("cond_enc.weight")?.clone(),
            bias: self.params.get("cond_enc.bias")?.clone(),
        })
    }

    pub fn bind<'a, 'g>(&'a self, g: &'g Graph<E>, trainable: bool) -> BoundDenoiser<'a, 'g, E> {
        BoundDenoiser { config: &self.config, p: self.params.bind(g, trainable) }
    }

    /// Bind caller-made variables, one per parameter in store order.
    pub fn bind_vars<'a, 'g>(&'a self, vars: &[Var<'g, E>]) -> Result<BoundDenoiser<'a, 'g, E>> {
        Ok(BoundDenoiser { config: &self.config, p: Bound::from_vars(&self.params, vars)? })
    }

    /// Tensor-level condition map: `[extra, encode(source)]` on the latent grid.
    pub fn condition(&self, source: Option<&Tensor<E>>, extra: Option<&Tensor<E>>, latent_hw: (usize, usize)) -> Result<Option<Tensor<E>>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let c = bound.condition(source.map(|s| g.constant(s.clone())), extra.map(|x| g.constant(x.clone())), latent_hw)?;
        Ok(c.map(|v| v.value()))
    }
}

impl<'g, E: Element> NoisePredictor<'g, E> for Denoiser<E> {
    fn predict(&self, x_t: Var<'g, E>, cond: Option<Var<'g, E>>, t: &[usize]) -> Result<Var<'g, E>> {
        self.bind(x_t.graph(), false).predict(x_t, cond, t)
    }
}

/// Denoiser parameters bound into a graph.
pub struct BoundDenoiser<'a, 'g, E: Element> {
    config: &'a DenoiserConfig,
    p: Bound<'g, E>,
}

impl<'g, E: Element> BoundDenoiser<'_, 'g, E> {
    pub fn params(&self) -> &Bound<'g, E> {
        &self.p
    }

    /// `[extra, encode(source)]`, or whichever part is present.
    pub fn condition(
        &self,
        source: Option<Var<'g, E>>,
        extra: Option<Var<'g, E>>,
        (h, w): (usize, usize),
    ) -> Result<Option<Var<'g, E>>> {
        let encoded = match source {
            Some(s) => {
                if self.config.source_channels == 0 {
                    return Err(Error::invalid("denoiser has no condition encoder"));
                }
                Some(encode_condition_var(s, h, w, self.p.get("cond_enc.weight")?, self.p.get("cond_enc.bias")?)?)
            }
            None => None,
        };
        Ok(match (extra, encoded) {
            (Some(x), Some(c)) => Some(x.concat_channels(c)?),
            (x, c) => x.or(c),
        })
    }

    fn conv(&self, x: Var<'g, E>, name: &str, pad: usize) -> Result<Var<'g, E>> {
        let w = self.p.get(&format!("{name}.weight"))?;
        let b = self.p.get(&format!("{name}.bias"))?;
        Ok(x.conv2d(w, Some(b), pad)?)
    }

    fn norm_act(&self, x: Var<'g, E>, name: &str) -> Result<Var<'g, E>> {
        let gm = self.p.get(&format!("{name}.gamma"))?;
        let bt = self.p.get(&format!("{name}.beta"))?;
        Ok(x.group_norm(gm, bt, self.config.groups, GN_EPS)?.silu()?)
    }

    fn res(&self, x: Var<'g, E>, temb: Var<'g, E>, name: &str) -> Result<Var<'g, E>> {
        let h = self.conv(self.norm_act(x, &format!("{name}.norm1"))?, &format!("{name}.conv1"), 1)?;
        let shift = temb.linear(self.p.get(&format!("{name}.time.weight"))?, Some(self.p.get(&format!("{name}.time.bias"))?))?;
        let h = h.channel_shift(shift)?;
        let h = self.conv(self.norm_act(h, &format!("{name}.norm2"))?, &format!("{name}.conv2"), 1)?;
        let skip = if self.p.get(&format!("{name}.skip.weight")).is_ok() { self.conv(x, &format!("{name}.skip"), 0)? } else { x };
        Ok(skip.add(h)?)
    }

    fn attn(&self, x: Var<'g, E>, name: &str) -> Result<Var<'g, E>> {
        let s = x.shape();
        let gm = self.p.get(&format!("{name}.norm.gamma"))?;
        let bt = self.p.get(&format!("{name}.norm.beta"))?;
        let h = x.group_norm(gm, bt, self.config.groups, GN_EPS)?;
        let q = self.conv(h, &format!("{name}.q"), 0)?.to_tokens()?;
        let k = self.conv(h, &format!("{name}.k"), 0)?.to_tokens()?;
        let v = self.conv(h, &format!("{name}.v"), 0)?.to_tokens()?;
        let a = attention(q, k, v)?.from_tokens(s[2], s[3])?;
        Ok(x.add(self.conv(a, &format!("{name}.proj"), 0)?)?)
    }

    fn check_inputs(&self, x_t: &Var<'g, E>, cond: Option<&Var<'g, E>>, t: &[usize]) -> Result<()> {
        let xs = x_t.shape();
        let cfg = self.config;
        if xs.len() != 4 || xs[1] != cfg.latent_channels {
            return Err(Error::invalid(format!("denoiser expects (N, {}, H, W), got {xs:?}", cfg.latent_channels)));
        }
        let m = cfg.spatial_multiple();
        if xs[2] % m != 0 || xs[3] % m != 0 {
            return Err(Error::invalid(format!("latent dims {}x{} must be multiples of {m}", xs[2], xs[3])));
        }
        match cond {
            Some(c) => {
                let cs = c.shape();
                if cs.len() != 4 || cs[0] != xs[0] || cs[2] != xs[2] || cs[3] != xs[3] {
                    return Err(Error::invalid(format!("condition {cs:?} does not match latent {xs:?}")));
                }
                if cs[1] != cfg.cond_channels {
                    return Err(Error::invalid(format!("expected {} condition channels, got {}", cfg.cond_channels, cs[1])));
                }
            }
            None if cfg.cond_channels > 0 => {
                return Err(Error::invalid("conditional denoiser called without a condition"));
            }
            None => {}
        }
        if t.len() != xs[0] {
            return Err(Error::invalid(format!("{} timesteps for a batch of {}", t.len(), xs[0])));
        }
        Ok(())
    }
}

impl<'g, E: Element> NoisePredictor<'g, E> for BoundDenoiser<'_, 'g, E> {
    fn predict(&self, x_t: Var<'g, E>, cond: Option<Var<'g, E>>, t: &[usize]) -> Result<Var<'g, E>> {
        self.check_inputs(&x_t, cond.as_ref(), t)?;
        let g = x_t.graph();
        let cfg = self.config;
        let temb = g.constant(time_embed_batch::<E>(t, cfg.time_embed_dim, cfg.horizon)?);
        let temb = temb.linear(self.p.get("time.fc1.weight")?, Some(self.p.get("time.fc1.bias")?))?.silu()?;
        let temb = temb.linear(self.p.get("time.fc2.weight")?, Some(self.p.get("time.fc2.bias")?))?;
        // Every residual block consumes silu(temb).
        let temb = temb.silu()?;

        let input = match cond {
            Some(c) => x_t.concat_channels(c)?,
            None => x_t,
        };
        let levels = cfg.levels();
        let mut h = self.conv(input, "conv_in", 1)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.res(h, temb, &format!("down{l}.res"))?;
            if l == cfg.attn_level() && l + 1 < levels {
                h = self.attn(h, &format!("down{l}.attn"))?;
            }
            skips.push(h);
            if l + 1 < levels {
                h = h.avg_pool2()?;
            }
        }
        h = self.res(h, temb, "mid.res1")?;
        if cfg.attn_level() + 1 == levels {
            h = self.attn(h, "mid.attn")?;
        }
        h = self.res(h, temb, "mid.res2")?;
        for l in (0..levels).rev() {
            h = self.res(h.concat_channels(skips[l])?, temb, &format!("up{l}.res"))?;
            if l > 0 {
                h = h.upsample2()?;
            }
        }
        self.conv(self.norm_act(h, "out.norm")?, "out.conv", 1)
    }
}
