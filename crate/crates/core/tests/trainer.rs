use bbdm_tensor::Rng;
use cbbdm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
use cbbdm::codec::{Codec, CodecKind};
use cbbdm::data::{split_by_longitude, synth_generate, PairedSample, SplitSpec, SynthConfig};
use cbbdm::trainer::*;
use cbbdm::Error;

fn data(n: usize) -> (Vec<PairedSample>, Vec<PairedSample>) {
    let samples = synth_generate(&SynthConfig { size: 32, ..SynthConfig::default() }, n).unwrap();
    split_by_longitude(samples, &SplitSpec { train_fraction: 0.75, buffer: 0.0 }).unwrap()
}

fn small(model: ModelKind, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        model,
        batch_size: 4,
        epochs: 1000,
        max_steps: Some(steps),
        horizon: 20,
        val_interval: 50,
        base_channels: 8,
        channel_mults: vec![1, 2],
        time_embed_dim: 16,
        groups: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = 2e-3;
    cfg
}

fn run(cfg: &TrainConfig, train_set: &[PairedSample], val: &[PairedSample]) -> TrainOutcome {
    let pipe = Pipeline::init(cfg, Codec::space_to_depth(3)).unwrap();
    train(cfg, pipe, train_set, val, |_| {}).unwrap()
}

#[test]
fn smoke_run_learns_and_is_reproducible() {
    let (train_set, val) = data(21);
    assert_eq!(train_set.len(), 16);
    let cfg = small(ModelKind::Cbbdm, 200);
    let mut events = 0;
    let pipe = Pipeline::init(&cfg, Codec::space_to_depth(3)).unwrap();
    let out = train(&cfg, pipe, &train_set, &val, |_| events += 1).unwrap();
    assert_eq!(out.steps, 200);
    assert!(out.diverged.is_none());
    assert_eq!(events, 200 + 4);
    let early: f64 = out.curve[..20].iter().map(|p| p.train_loss).sum::<f64>() / 20.0;
    let late: f64 = out.curve[180..].iter().map(|p| p.train_loss).sum::<f64>() / 20.0;
    assert!(late < early, "train loss {early} -> {late}");
    let hist = &out.best.val_history;
    assert_eq!(hist.iter().map(|v| v.step).collect::<Vec<_>>(), vec![50, 100, 150, 200]);
    assert!(hist[3].loss < hist[0].loss);
    let best = hist.iter().map(|v| v.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(hist.iter().find(|v| v.loss == best).unwrap().step, out.best.step);
    assert!(out.val_digests.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out.val_digests.len(), 4);

    let again = run(&cfg, &train_set, &val);
    assert_eq!(again.last.to_bytes().unwrap(), out.last.to_bytes().unwrap());
    assert_eq!(again.best.step, out.best.step);

    let csv = curve_csv(&out.curve);
    assert!(csv.starts_with("step,train_loss,val_loss\n"));
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn every_model_kind_trains_and_translates() {
    let (train_set, val) = data(12);
    for kind in [ModelKind::Cbbdm, ModelKind::Bbdm, ModelKind::Gaussian] {
        let cfg = small(kind, 6);
        let out = run(&cfg, &train_set, &val);
        assert_eq!(out.steps, 6);
        let pipe = Pipeline::from_checkpoint(&out.best).unwrap();
        assert_eq!(pipe.kind, kind);
        let sources: Vec<_> = val.iter().map(|s| s.source.clone()).collect();
        let a = pipe.translate(&sources, 5, true, &Rng::new(1), |_, _| {}).unwrap();
        let b = pipe.translate(&sources, 5, true, &Rng::new(1), |_, _| {}).unwrap();
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(pipe.translate(&sources, 3, true, &Rng::new(1), |_, _| {}).is_err());
    }
}

#[test]
fn overlapping_longitudes_are_refused() {
    let (train_set, val) = data(8);
    let cfg = small(ModelKind::Bbdm, 2);
    let pipe = Pipeline::init(&cfg, Codec::space_to_depth(3)).unwrap();
    let mut leaky = val.clone();
    leaky[0].longitude = train_set[0].longitude;
    assert!(matches!(train(&cfg, pipe, &train_set, &leaky, |_| {}), Err(Error::Dataset(_))));
}

#[test]
fn divergence_stops_training_cleanly() {
    let (train_set, val) = data(8);
    let mut cfg = small(ModelKind::Bbdm, 50);
    cfg.optimizer.lr = 1e36;
    let out = run(&cfg, &train_set, &val);
    assert!(out.diverged.is_some(), "expected divergence");
    assert!(out.steps < 50);
    assert!(out.last.params.is_finite());
}

#[test]
fn config_validation_and_json_strictness() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { horizon: 1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { hflip_p: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"horizon": 50, "typo": 1}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"model": "bbdm", "codec": "tiny_ae"}"#).unwrap();
    assert_eq!((cfg.model, cfg.codec), (ModelKind::Bbdm, CodecKind::TinyAe));
}

fn checkpoint() -> Checkpoint {
    let cfg = small(ModelKind::Cbbdm, 1);
    Pipeline::init(&cfg, Codec::space_to_depth(3)).unwrap().checkpoint(&cfg, 7, vec![])
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..6], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn tiny_ae_checkpoint_keeps_codec_weights() {
    let cfg = TrainConfig { codec: CodecKind::TinyAe, ..small(ModelKind::Bbdm, 1) };
    let codec = Codec::tiny_ae(3, 16, &Rng::new(3)).unwrap();
    let ckpt = Pipeline::init(&cfg, codec.clone()).unwrap().checkpoint(&cfg, 0, vec![]);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.codec().unwrap(), codec);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = checkpoint().to_bytes().unwrap();
    let is_ckpt_err = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::Checkpoint(_)));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(is_ckpt_err(&bad_magic));
    assert!(is_ckpt_err(&bytes[..bytes.len() - 4]));
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 0, 0, 0]);
    assert!(is_ckpt_err(&trailing));
    assert!(is_ckpt_err(&bytes[..8]));

    // Rewrite one shape in the header so it no longer matches the layout.
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
    let tampered = header.replacen("\"shape\":[48,8,3,3]", "\"shape\":[48,8,9,1]", 1);
    assert_ne!(tampered, header);
    let mut out = bytes[..6].to_vec();
    out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
    out.extend_from_slice(tampered.as_bytes());
    out.extend_from_slice(&bytes[10 + len..]);
    assert!(is_ckpt_err(&out));
}
