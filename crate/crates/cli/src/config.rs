use std::path::{Path, PathBuf};

use cbbdm::data::{ClaheParams, SplitSpec, SynthConfig};
use cbbdm::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run needs, as one JSON document. Command-line flags override
/// the values read from it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub clahe: ClaheParams,
    /// Crop side for raw tiles, pixels.
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default)]
    pub paths: Paths,
}

fn default_crop() -> usize {
    256
}

/// Optional file locations; relative entries resolve against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn fresh() -> Self {
        RunConfig { version: CONFIG_VERSION, crop: default_crop(), ..RunConfig::default() }
    }

    /// Read a config, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::fresh()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        if raw.get("version").is_none() {
            return Err(Failure::input(format!("{}: missing \"version\" field", path.display())));
        }
        let mut cfg: RunConfig =
            serde_json::from_value(raw).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Failure::input(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.out, &mut cfg.paths.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
