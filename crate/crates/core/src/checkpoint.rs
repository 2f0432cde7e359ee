//! Checkpoint files: `CBBDM1`, a u32 LE header length, a JSON header and a
//! little-endian tensor payload described by the header's tensor directory.

use std::path::Path;

use bbdm_tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecKind};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 6] = b"CBBDM1";
const CODEC_PREFIX: &str = "codec.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecMeta {
    pub kind: CodecKind,
    pub image_channels: usize,
    pub latent_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset into the payload.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    denoiser: DenoiserConfig,
    codec: CodecMeta,
    step: usize,
    val_history: Vec<ValPoint>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub codec: CodecMeta,
    pub step: usize,
    pub val_history: Vec<ValPoint>,
    pub params: ParamStore<f32>,
    pub codec_params: Option<ParamStore<f32>>,
}

impl Checkpoint {
    pub fn codec(&self) -> Result<Codec<f32>> {
        let m = &self.codec;
        let codec = match m.kind {
            CodecKind::Identity => Codec::identity(m.image_channels),
            CodecKind::SpaceToDepth => Codec::space_to_depth(m.image_channels),
            CodecKind::TinyAe => Codec {
                kind: CodecKind::TinyAe,
                image_channels: m.image_channels,
                latent_channels: m.latent_channels,
                ae_params: Some(
                    self.codec_params.clone().ok_or_else(|| Error::Checkpoint("tiny_ae codec without parameters".into()))?,
                ),
            },
        };
        if codec.latent_channels != m.latent_channels {
            return Err(Error::Checkpoint(format!(
                "codec {} has {} latent channels, header says {}",
                m.kind.name(),
                codec.latent_channels,
                m.latent_channels
            )));
        }
        Ok(codec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let codec_iter = self.codec_params.iter().flat_map(|p| p.iter().map(|(n, t)| (format!("{CODEC_PREFIX}{n}"), t)));
        for (name, t) in self.params.iter().map(|(n, t)| (n.to_string(), t)).chain(codec_iter) {
            tensors.push(TensorEntry {
                name,
                offset: payload.len(),
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE.name().to_string(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            train: self.train.clone(),
            denoiser: self.denoiser.clone(),
            codec: self.codec.clone(),
            step: self.step,
            val_history: self.val_history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return err("bad magic".into());
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let Some(json) = bytes.get(10..10 + len) else {
            return err(format!("header length {len} exceeds file size"));
        };
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let payload = &bytes[10 + len..];
        let mut params = ParamStore::new();
        let mut codec_params = ParamStore::new();
        let mut expected_offset = 0;
        for e in &header.tensors {
            let dtype = match e.dtype.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return err(format!("{}: unknown dtype {other:?}", e.name)),
            };
            if e.offset != expected_offset {
                return err(format!("{}: offset {} where {expected_offset} was expected", e.name, e.offset));
            }
            let numel = e.shape.iter().product::<usize>();
            let end = e.offset + numel * dtype.size();
            let Some(raw) = payload.get(e.offset..end) else {
                return err(format!("{}: shape {:?} runs past the payload", e.name, e.shape));
            };
            let data: Vec<f32> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(f32::read_le).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
            };
            let t = Tensor::new(e.shape.clone(), data)?;
            match e.name.strip_prefix(CODEC_PREFIX) {
                Some(n) => codec_params.insert(n, t)?,
                None => params.insert(e.name.clone(), t)?,
            }
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return err(format!("{} trailing payload bytes", payload.len() - expected_offset));
        }
        let ckpt = Checkpoint {
            train: header.train,
            denoiser: header.denoiser,
            codec: header.codec,
            step: header.step,
            val_history: header.val_history,
            params,
            codec_params: (!codec_params.is_empty()).then_some(codec_params),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Parameters agree with the configurations recorded beside them.
    pub fn validate(&self) -> Result<()> {
        let reference = crate::denoiser::Denoiser::<f32>::init(self.denoiser.clone(), &bbdm_tensor::Rng::new(0))
            .map_err(|e| Error::Checkpoint(format!("invalid denoiser config: {e}")))?;
        if !reference.params.same_layout(&self.params) {
            return Err(Error::Checkpoint("parameters do not match the denoiser configuration".into()));
        }
        if self.denoiser.latent_channels != self.codec.latent_channels {
            return Err(Error::Checkpoint(format!(
                "denoiser expects {} latent channels, codec produces {}",
                self.denoiser.latent_channels, self.codec.latent_channels
            )));
        }
        self.codec().map(|_| ())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
