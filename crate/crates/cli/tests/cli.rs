use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bbdm_tensor::{io::write_tensor, Rng, Tensor};

fn cbbdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbbdm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cbbdm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the stderr text, which must be one line.
fn fails(args: &[&str]) -> (i32, String) {
    let out = cbbdm(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "));
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn schedule_dump_matches_hand_table() {
    let csv = ok(&["schedule", "dump", "--T", "4", "--format", "csv"]);
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| if v.is_empty() { f64::NAN } else { v.parse().unwrap() }).collect()).collect();
    assert_eq!(csv.lines().next().unwrap(), "t,m,delta,delta_cond,delta_tilde,c_eps");
    assert_eq!(rows.len(), 5);
    let delta = [0.0, 0.375, 0.5, 0.375, 0.0];
    let c_eps = [1.0, 0.5, 1.0 / 3.0, 0.0];
    // Step quantities are undefined at t = 0.
    assert!(rows[0][3..].iter().all(|v| v.is_nan()));
    for t in 0..5 {
        assert!((rows[t][1] - t as f64 / 4.0).abs() < 1e-12);
        assert!((rows[t][2] - delta[t]).abs() < 1e-12);
        if t > 0 {
            assert!((rows[t][5] - c_eps[t - 1]).abs() < 1e-12);
        }
    }
    assert_eq!(fails(&["schedule", "dump", "--T", "1"]).0, 2);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--n", "8", "--seed", "3", "--size", "32"]);
    }
    assert_eq!(lines(&a.join("manifest.jsonl")).len(), 8);
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 17);

    let empty = dir.path().join("empty");
    assert_eq!(fails(&["gen-data", "--out", s(&empty), "--n", "0"]).0, 2);
    assert!(!empty.exists());
}

fn raw_tile(dir: &Path, id: &str, lon: Option<f64>, rng: &mut Rng) -> String {
    let raster = |name: &str, rng: &mut Rng| {
        let t = Tensor::new(vec![32, 32], (0..32 * 32).map(|_| 0.1 + rng.uniform() as f32).collect()).unwrap();
        let p = dir.join(format!("{id}_{name}.ndt"));
        write_tensor(&p, &t).unwrap();
        p.file_name().unwrap().to_str().unwrap().to_string()
    };
    let (vv, vh, hh) = (raster("vv", rng), raster("vh", rng), raster("hh", rng));
    let opt = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.uniform() as f32).collect()).unwrap();
    write_tensor(dir.join(format!("{id}_opt.ndt")), &opt).unwrap();
    let mut rec = serde_json::json!({"id": id, "vv": vv, "vh": vh, "hh": hh, "optical": format!("{id}_opt.ndt")});
    if let Some(lon) = lon {
        rec["longitude"] = lon.into();
    }
    rec.to_string()
}

#[test]
fn preprocess_splits_tiles_by_longitude() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(1);
    let recs: Vec<String> = (0..5).map(|i| raw_tile(dir.path(), &format!("t{i}"), Some(10.0 + i as f64), &mut rng)).collect();
    let manifest = dir.path().join("tiles.jsonl");
    std::fs::write(&manifest, recs.join("\n")).unwrap();
    let out = dir.path().join("prep");
    ok(&["preprocess", "--manifest", s(&manifest), "--out", s(&out), "--split-fraction", "0.8", "--crop", "16"]);

    let rows = lines(&out.join("manifest.jsonl"));
    let tiles = |split: &str| {
        let mut ids: Vec<String> = rows
            .iter()
            .filter(|r| r["split"] == split)
            .map(|r| r["id"].as_str().unwrap().split('_').next().unwrap().to_string())
            .collect();
        ids.dedup();
        ids
    };
    assert_eq!(tiles("train"), ["t0", "t1", "t2", "t3"]);
    assert_eq!(tiles("val"), ["t4"]);
    assert_eq!(rows.len(), 5 * 4);
    let lon = |split: &str| -> Vec<f64> {
        rows.iter().filter(|r| r["split"] == split).map(|r| r["longitude"].as_f64().unwrap()).collect()
    };
    assert!(lon("train").into_iter().fold(f64::MIN, f64::max) < lon("val").into_iter().fold(f64::MAX, f64::min));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, [recs[0].clone(), raw_tile(dir.path(), "nolon", None, &mut rng)].join("\n")).unwrap();
    let (code, err) = fails(&["preprocess", "--manifest", s(&broken), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("nolon"), "{err}");
}

const SMALL: &str = r#"{
    "version": 1,
    "train": {"batch_size": 2, "epochs": 100, "max_steps": 4, "horizon": 10, "val_interval": 2,
              "base_channels": 8, "channel_mults": [1, 2], "time_embed_dim": 16, "groups": 4}
}"#;

#[test]
fn train_translate_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("run.json"), SMALL).unwrap();
    ok(&["gen-data", "--out", s(&p("data")), "--n", "10", "--size", "32"]);
    ok(&["preprocess", "--manifest", s(&p("data/manifest.jsonl")), "--out", s(&p("split")), "--split-fraction", "0.7"]);
    let split = p("split/manifest.jsonl");
    ok(&["train", "--config", s(&p("run.json")), "--manifest", s(&split), "--out", s(&p("run")), "--model", "bbdm"]);
    for f in ["best.ckpt", "last.ckpt", "curve.csv", "config.json"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(p("run/curve.csv")).unwrap().lines().count(), 5);

    let ckpt = p("run/best.ckpt");
    for out in ["t1", "t2"] {
        ok(&["translate", "--checkpoint", s(&ckpt), "--manifest", s(&split), "--out", s(&p(out)), "--deterministic", "--seed", "4"]);
    }
    assert_eq!(files(&p("t1")), files(&p("t2")));
    let val_rows = lines(&split).iter().filter(|r| r["split"] == "val").count();
    assert_eq!(lines(&p("t1/translations.jsonl")).len(), val_rows);

    let csv = ok(&["eval", "--manifest", s(&p("t1/translations.jsonl"))]);
    assert_eq!(csv.lines().count(), val_rows + 2);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));

    let (code, _) = fails(&["translate", "--checkpoint", s(&ckpt), "--manifest", s(&split), "--out", s(&p("t3")), "--stride", "3"]);
    assert_eq!(code, 2);
}

#[test]
fn eval_of_identical_pairs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path()), "--n", "3", "--size", "16"]);
    let same: Vec<String> = lines(&dir.path().join("manifest.jsonl"))
        .into_iter()
        .map(|mut r| {
            r["target_path"] = r["source_path"].clone();
            r.to_string()
        })
        .collect();
    let manifest = dir.path().join("same.jsonl");
    std::fs::write(&manifest, same.join("\n")).unwrap();
    let csv = ok(&["eval", "--manifest", s(&manifest)]);
    for row in csv.lines().skip(1) {
        let v: Vec<&str> = row.split(',').collect();
        assert_eq!(v[1].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(v[3].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(v[4].parse::<f64>().unwrap(), 1.0, "{row}");
    }
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("typo.json"), r#"{"version": 1, "trian": {}}"#).unwrap();
    std::fs::write(p("noversion.json"), r#"{"train": {}}"#).unwrap();
    for cfg in ["typo.json", "noversion.json"] {
        let (code, _) = fails(&["gen-data", "--config", s(&p(cfg)), "--out", s(&p("x")), "--n", "2"]);
        assert_eq!(code, 2);
    }
    assert_eq!(fails(&["train", "--bogus"]).0, 2);
    assert_eq!(fails(&["eval", "--manifest", s(&p("missing.jsonl"))]).0, 2);
}

#[test]
fn mismatched_images_are_rejected_before_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("run.json"), SMALL).unwrap();
    ok(&["gen-data", "--out", s(&p("data")), "--n", "6", "--size", "32"]);
    ok(&["train", "--config", s(&p("run.json")), "--manifest", s(&p("data/manifest.jsonl")), "--out", s(&p("run"))]);

    let odd = Tensor::<f32>::full(vec![3, 30, 30], 0.5);
    write_tensor(p("odd.ndt"), &odd).unwrap();
    let rec = serde_json::json!({"id": "odd", "source_path": "odd.ndt", "target_path": "odd.ndt", "longitude": 1.0});
    std::fs::write(p("odd.jsonl"), rec.to_string()).unwrap();
    let (code, err) = fails(&["translate", "--checkpoint", s(&p("run/best.ckpt")), "--manifest", s(&p("odd.jsonl")), "--out", s(&p("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("odd"), "{err}");
    assert!(!p("o").exists());
}
