use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bbdm_tensor::Rng;
use cbbdm::checkpoint::{load_checkpoint, save_checkpoint};
use cbbdm::codec::CodecKind;
use cbbdm::data::{
    load_image, load_manifest_samples, preprocess_sidecar, read_manifest, split_by_longitude, synth_generate,
    write_dataset, write_manifest, Located, ManifestRecord, PairedSample, TileSidecar,
};
use cbbdm::metrics::{MetricReport, MetricRow};
use cbbdm::schedule::BridgeSchedule;
use cbbdm::trainer::{build_codec, curve_csv, train, ModelKind, Pipeline, TrainEvent};
use clap::{Parser, Subcommand, ValueEnum};

mod config;
use config::RunConfig;

/// Error carrying the process exit code: 2 for bad input, 1 for failures at run time.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<cbbdm::Error> for Failure {
    fn from(e: cbbdm::Error) -> Self {
        use cbbdm::Error::*;
        let code = match &e {
            InvalidArgument(_) | Checkpoint(_) | Dataset(_) | Json(_) | TimestepOutOfRange { .. } => 2,
            Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::runtime(format!("{e:#}"))
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "cbbdm", version, about = "SAR-to-optical translation with Brownian bridge diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Png,
    Ndt,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ndt => "ndt",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_enum, default_value = "ndt")]
        format: ImageFormat,
    },
    /// Composite, equalize and crop raw tiles, and assign longitude splits.
    Preprocess {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split_fraction: Option<f64>,
        #[arg(long)]
        buffer: Option<f64>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long, value_enum, default_value = "ndt")]
        format: ImageFormat,
    },
    /// Train a model on a split manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long, value_enum)]
        codec: Option<CodecArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "T")]
        horizon: Option<usize>,
    },
    /// Translate every validation row of a manifest.
    Translate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "png")]
        format: ImageFormat,
    },
    /// Score predictions (manifest sources) against references (manifest targets).
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noise schedule utilities.
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Print the bridge schedule table.
    Dump {
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: TableFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cbbdm,
    Bbdm,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Identity,
    SpaceToDepth,
    TinyAe,
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone()).ok_or_else(|| Failure::input(format!("--{name} is required")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, n, seed, size, format } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let out = required(out, &cfg.paths.out, "out")?;
            let mut synth = cfg.synth;
            synth.seed = seed.unwrap_or(synth.seed);
            synth.size = size.unwrap_or(synth.size);
            if n == 0 {
                return Err(Failure::input("--n must be at least 1"));
            }
            let samples = synth_generate(&synth, n)?;
            let rows: Vec<(PairedSample, Option<&str>)> = samples.into_iter().map(|s| (s, None)).collect();
            let manifest = write_dataset(&out, &rows, format.ext())?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Preprocess { config, manifest, out, split_fraction, buffer, crop, format } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let mut spec = cfg.split;
            spec.train_fraction = split_fraction.unwrap_or(spec.train_fraction);
            spec.buffer = buffer.unwrap_or(spec.buffer);
            preprocess(&manifest, &out, spec, crop.unwrap_or(cfg.crop), &cfg, format)
        }
        Command::Train { config, manifest, out, model, codec, steps, epochs, batch_size, lr, seed, horizon } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let out = required(out, &cfg.paths.out, "out")?;
            let t = &mut cfg.train;
            if let Some(m) = model {
                t.model = match m {
                    ModelArg::Cbbdm => ModelKind::Cbbdm,
                    ModelArg::Bbdm => ModelKind::Bbdm,
                    ModelArg::Gaussian => ModelKind::Gaussian,
                };
            }
            if let Some(c) = codec {
                t.codec = match c {
                    CodecArg::Identity => CodecKind::Identity,
                    CodecArg::SpaceToDepth => CodecKind::SpaceToDepth,
                    CodecArg::TinyAe => CodecKind::TinyAe,
                };
            }
            if steps.is_some() {
                t.max_steps = steps;
            }
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.optimizer.lr = lr.unwrap_or(t.optimizer.lr);
            t.seed = seed.unwrap_or(t.seed);
            t.horizon = horizon.unwrap_or(t.horizon);
            run_train(&cfg, &manifest, &out)
        }
        Command::Translate { config, checkpoint, manifest, out, stride, deterministic, seed, format } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            let out = required(out, &cfg.paths.out, "out")?;
            translate(&checkpoint, &manifest, &out, stride, deterministic, seed, format)
        }
        Command::Eval { manifest, out } => {
            let rows = load_manifest_samples(&manifest)?
                .into_iter()
                .map(|(_, s)| MetricRow::compute(s.id.clone(), &s.source, &s.target))
                .collect::<cbbdm::Result<Vec<_>>>()?;
            let csv = MetricReport::from_rows(rows)?.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Schedule { command: ScheduleCommand::Dump { horizon, format: TableFormat::Csv } } => {
            print!("{}", BridgeSchedule::new(horizon)?.to_csv());
            Ok(())
        }
    }
}

/// One manifest line: a raw tile sidecar or an already paired record.
enum Entry {
    Tile(TileSidecar),
    Pair(ManifestRecord),
}

struct ManifestEntry {
    entry: Entry,
    lon: f64,
    id: String,
}

impl Located for ManifestEntry {
    fn longitude(&self) -> f64 {
        self.lon
    }
    fn id(&self) -> &str {
        &self.id
    }
}

fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = format!("{}:{}", path.display(), i + 1);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Failure::input(format!("{at}: {e}")))?;
        let name = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        let label = name.clone().unwrap_or_else(|| format!("line {}", i + 1));
        if value.get("longitude").is_none() {
            return Err(Failure::input(format!("{at}: record {label} has no longitude")));
        }
        let entry = if value.get("vv").is_some() {
            Entry::Tile(serde_json::from_value(value).map_err(|e| Failure::input(format!("{at}: record {label}: {e}")))?)
        } else {
            Entry::Pair(serde_json::from_value(value).map_err(|e| Failure::input(format!("{at}: record {label}: {e}")))?)
        };
        let (lon, id) = match &entry {
            Entry::Tile(t) => (t.longitude, t.id.clone()),
            Entry::Pair(r) => (r.longitude, r.id.clone()),
        };
        if !lon.is_finite() {
            return Err(Failure::input(format!("{at}: record {id} has a non-finite longitude")));
        }
        entries.push(ManifestEntry { entry, lon, id });
    }
    if entries.is_empty() {
        return Err(Failure::input(format!("{}: manifest is empty", path.display())));
    }
    Ok(entries)
}

fn absolute(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).map_err(|e| Failure::input(format!("{}: {e}", joined.display())))
}

fn preprocess(
    manifest: &Path,
    out: &Path,
    spec: cbbdm::data::SplitSpec,
    crop: usize,
    cfg: &RunConfig,
    format: ImageFormat,
) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let (train_set, val) = split_by_longitude(read_entries(manifest)?, &spec)?;
    let mut samples: Vec<(PairedSample, Option<&str>)> = Vec::new();
    let mut records = Vec::new();
    for (group, label) in [(train_set, "train"), (val, "val")] {
        for item in group {
            match item.entry {
                Entry::Tile(side) => {
                    for s in preprocess_sidecar(&side, base, crop, &cfg.clahe)? {
                        samples.push((s, Some(label)));
                    }
                }
                Entry::Pair(r) => records.push(ManifestRecord {
                    source_path: absolute(base, &r.source_path)?,
                    target_path: absolute(base, &r.target_path)?,
                    split: Some(label.to_string()),
                    ..r
                }),
            }
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = if samples.is_empty() {
        let path = out.join("manifest.jsonl");
        write_manifest(&path, &records)?;
        path
    } else {
        if !records.is_empty() {
            return Err(Failure::input("manifest mixes raw tiles and paired records"));
        }
        write_dataset(out, &samples, format.ext())?
    };
    println!("{}", path.display());
    Ok(())
}

/// Samples of a split manifest, divided by its split column. A manifest
/// without split labels is divided by longitude with `spec`.
fn load_split(manifest: &Path, spec: &cbbdm::data::SplitSpec) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let rows = load_manifest_samples(manifest)?;
    if rows.iter().all(|(r, _)| r.split.is_none()) {
        return Ok(split_by_longitude(rows.into_iter().map(|(_, s)| s).collect(), spec)?);
    }
    let (mut train_set, mut val) = (Vec::new(), Vec::new());
    for (r, s) in rows {
        match r.split.as_deref() {
            Some("train") => train_set.push(s),
            Some("val") => val.push(s),
            other => return Err(Failure::input(format!("record {}: unknown split {other:?}", r.id))),
        }
    }
    Ok((train_set, val))
}

fn run_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let (train_set, val) = load_split(manifest, &cfg.split)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg).expect("config serializes"))
        .context("writing config.json")?;
    let codec = build_codec(&cfg.train, &train_set)?;
    let pipe = Pipeline::init(&cfg.train, codec)?;
    let result = train(&cfg.train, pipe, &train_set, &val, |e| {
        if let TrainEvent::Validation { step, loss } = e {
            eprintln!("step {step} val_loss {loss:.6}");
        }
    })?;
    save_checkpoint(&result.best, &out.join("best.ckpt"))?;
    save_checkpoint(&result.last, &out.join("last.ckpt"))?;
    std::fs::write(out.join("curve.csv"), curve_csv(&result.curve)).context("writing curve.csv")?;
    if let Some(reason) = result.diverged {
        return Err(Failure::runtime(format!("training diverged after {} steps: {reason}", result.steps)));
    }
    eprintln!("best step {} of {}", result.best.step, result.steps);
    Ok(())
}

fn translate(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    stride: usize,
    deterministic: bool,
    seed: u64,
    format: ImageFormat,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let pipe = Pipeline::from_checkpoint(&ckpt)?;
    if stride == 0 || pipe.bridge.horizon() % stride != 0 {
        return Err(Failure::input(format!("stride {stride} must divide T = {}", pipe.bridge.horizon())));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    let labelled = records.iter().any(|r| r.split.is_some());
    let rows: Vec<ManifestRecord> = records.into_iter().filter(|r| !labelled || r.split.as_deref() == Some("val")).collect();
    if rows.is_empty() {
        return Err(Failure::input(format!("{}: no validation rows", manifest.display())));
    }
    let mut sources = Vec::with_capacity(rows.len());
    for r in &rows {
        let img = load_image(&absolute(base, &r.source_path)?)?;
        let s = img.shape();
        if s[0] != pipe.codec.image_channels {
            return Err(Failure::input(format!(
                "record {}: {} channels, checkpoint expects {}",
                r.id, s[0], pipe.codec.image_channels
            )));
        }
        pipe.codec
            .latent_shape(&[1, s[0], s[1], s[2]])
            .map_err(|e| Failure::input(format!("record {}: {e}", r.id)))?;
        sources.push(img);
    }
    let images = pipe.translate(&sources, stride, deterministic, &Rng::new(seed), |done, total| {
        eprintln!("translated chunk {done}/{total}");
    })?;
    std::fs::create_dir_all(out.join("images")).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Vec::with_capacity(rows.len());
    for (r, img) in rows.into_iter().zip(&images) {
        let rel = PathBuf::from("images").join(format!("{}.{}", r.id, format.ext()));
        cbbdm::data::save_image(&out.join(&rel), img)?;
        outputs.push(ManifestRecord { source_path: rel, target_path: absolute(base, &r.target_path)?, ..r });
    }
    let path = out.join("translations.jsonl");
    write_manifest(&path, &outputs)?;
    println!("{}", path.display());
    Ok(())
}
