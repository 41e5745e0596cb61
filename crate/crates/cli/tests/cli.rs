//! End-to-end tests of the `mmsr` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmsr::imaging::{load_png, save_png, ColorSpace, Image, IntensityRange};
use mmsr::trainer::checkpoint_param_count;
use mmsr::Tensor;

fn mmsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsr"))
        .args(args)
        .env("MMSR_LOG", "info")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Deterministic RGB test pattern in byte range.
fn pattern(h: usize, w: usize, phase: usize) -> Image<f64> {
    let px = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((y * 7 + x * 3 + c * 50 + phase * 11) % 256) as f64);
    Image::new(px, IntensityRange::Byte, ColorSpace::Rgb).unwrap()
}

fn write_pattern(dir: &Path, name: &str, h: usize, w: usize, phase: usize) -> PathBuf {
    let p = dir.join(name);
    save_png(&pattern(h, w, phase), &p).unwrap();
    p
}

#[test]
fn degrade_halves_dimensions_and_writes_manifest() {
    let hr = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_pattern(hr.path(), "a.png", 120, 120, 0);
    write_pattern(hr.path(), "b.png", 64, 80, 1);
    let o = mmsr(&["degrade", "--hr-dir", s(hr.path()), "--out-dir", s(out.path()), "--scale", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = load_png::<f64>(&out.path().join("a.png")).unwrap();
    assert_eq!((a.height(), a.width()), (60, 60));
    let b = load_png::<f64>(&out.path().join("b.png")).unwrap();
    assert_eq!((b.height(), b.width()), (32, 40));
    let manifest = std::fs::read_to_string(out.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["scale"], 2);
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("effective configuration"));
}

#[test]
fn degrade_without_noise_is_deterministic() {
    let hr = tempfile::tempdir().unwrap();
    write_pattern(hr.path(), "a.png", 48, 48, 3);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let o = mmsr(&["degrade", "--hr-dir", s(hr.path()), "--out-dir", s(out.path()), "--scale", "3", "--sigma", "0"]);
        assert!(o.status.success());
        outputs.push(std::fs::read(out.path().join("a.png")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn degrade_with_noise_is_reproducible_from_seed() {
    let hr = tempfile::tempdir().unwrap();
    write_pattern(hr.path(), "a.png", 40, 40, 2);
    let run = |seed: &str| {
        let out = tempfile::tempdir().unwrap();
        let args = ["degrade", "--hr-dir", s(hr.path()), "--out-dir", s(out.path()), "--sigma", "5", "--seed", seed];
        assert!(mmsr(&args).status.success());
        std::fs::read(out.path().join("a.png")).unwrap()
    };
    assert_eq!(run("4"), run("4"));
    assert_ne!(run("4"), run("5"));
}

#[test]
fn degrade_lists_partial_failures_with_data_exit_code() {
    let hr = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_pattern(hr.path(), "good.png", 32, 32, 0);
    std::fs::write(hr.path().join("broken.png"), b"not a png").unwrap();
    let o = mmsr(&["degrade", "--hr-dir", s(hr.path()), "--out-dir", s(out.path()), "--scale", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.png"));
    let manifest = std::fs::read_to_string(out.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn degrade_dumps_taps() {
    let hr = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_pattern(hr.path(), "a.png", 16, 16, 0);
    let taps = out.path().join("taps.txt");
    let args =
        ["degrade", "--hr-dir", s(hr.path()), "--out-dir", s(out.path()), "--scale", "2", "--dump-taps", s(&taps)];
    assert!(mmsr(&args).status.success());
    assert!(!std::fs::read_to_string(&taps).unwrap().is_empty());
}

#[test]
fn train_with_zero_epochs_writes_init_checkpoint_then_sr_upscales() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.isrr");
    let o = mmsr(&["train", "--scale", "4", "--epochs", "0", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = checkpoint_param_count(&ckpt).unwrap();
    // ×4 uses the feedback fuse (379,588 + 8,256 + 128) and K = 10 weights.
    assert_eq!(count, 387_972 + 10);

    let lr = write_pattern(dir.path(), "lr.png", 40, 40, 5);
    let before = std::fs::read(&lr).unwrap();
    let out = dir.path().join("sr.png");
    let o = mmsr(&["sr", "--checkpoint", s(&ckpt), "--input", s(&lr), "--output", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sr = load_png::<f64>(&out).unwrap();
    assert_eq!((sr.height(), sr.width()), (160, 160));
    assert_eq!(std::fs::read(&lr).unwrap(), before, "input must not be modified");
}

#[test]
fn sr_ensemble_flag_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.isrr");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "scale = 2\nK = 2\nfb_steps = 1\nepochs = 0\nfeatures = 8\nresblocks = 1\n").unwrap();
    assert!(mmsr(&["--config", s(&cfg), "train", "--checkpoint", s(&ckpt)]).status.success());
    let lr = write_pattern(dir.path(), "lr.png", 12, 10, 1);
    let out = dir.path().join("sr.png");
    let o = mmsr(&["sr", "--checkpoint", s(&ckpt), "--input", s(&lr), "--output", s(&out), "--ensemble"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sr = load_png::<f64>(&out).unwrap();
    assert_eq!((sr.height(), sr.width()), (24, 20));
}

#[test]
fn short_training_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for i in 0..2 {
        write_pattern(&data, &format!("{i}.png"), 40, 40, i);
    }
    let ckpt = dir.path().join("model.isrr");
    let log = dir.path().join("train.jsonl");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "scale = 2\nK = 2\ntbptt_k = 1\nfb_steps = 1\nfeatures = 8\nresblocks = 1\nbatch_size = 2\n\
         batches_per_epoch = 1\nlr_patch = 8\nepochs = 1\n",
    )
    .unwrap();
    let args = ["--config", s(&cfg), "train", "--data-dir", s(&data), "--checkpoint", s(&ckpt), "--log", s(&log)];
    let o = mmsr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.is_file());
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // K = 2 with tbptt_k = 1 gives two updates per batch.
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|v| v["loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let gt = tempfile::tempdir().unwrap();
    write_pattern(gt.path(), "a.png", 48, 48, 0);
    write_pattern(gt.path(), "b.png", 40, 44, 1);
    let records = gt.path().join("records.jsonl");
    let o = mmsr(&["eval", "--sr-dir", s(gt.path()), "--gt-dir", s(gt.path()), "--scale", "4", "--records", s(&records)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&records).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let aggregate = rows.last().unwrap();
    assert_eq!(aggregate["mean_ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(aggregate["mean_psnr"], "inf");
    assert!(rows[..rows.len() - 1].iter().all(|r| r["psnr"] == "inf"));
    assert!(!o.stdout.is_empty());
}

#[test]
fn eval_missing_sr_image_is_a_data_error() {
    let gt = tempfile::tempdir().unwrap();
    let sr = tempfile::tempdir().unwrap();
    write_pattern(gt.path(), "a.png", 32, 32, 0);
    let o = mmsr(&["eval", "--sr-dir", s(sr.path()), "--gt-dir", s(gt.path()), "--scale", "2"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scale = 2\nlearning_rate = 0.1\n").unwrap();
    let ckpt = dir.path().join("x.isrr");
    let o = mmsr(&["--config", s(&cfg), "train", "--epochs", "0", "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!ckpt.exists());
    let o = mmsr(&["train", "--epochs", "0", "--checkpoint", s(&ckpt), "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("x.isrr");
    let o = mmsr(&["train", "--epochs", "0", "--checkpoint", s(&ckpt), "--set", "tbptt_k=9", "--K", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "scale = 4\nepochs = 0\nfb_steps = 1\nK = 2\n").unwrap();
    let ckpt = dir.path().join("x.isrr");
    let o = mmsr(&["--config", s(&cfg), "train", "--scale", "2", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("scale=2"), "{log}");
    // Without the fuse layer the default ERD has 379,588 parameters.
    assert_eq!(checkpoint_param_count(&ckpt).unwrap(), 379_588 + 2);
}

#[test]
fn sr_with_corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.isrr");
    std::fs::write(&ckpt, b"ISRR garbage").unwrap();
    let lr = write_pattern(dir.path(), "lr.png", 8, 8, 0);
    let out = dir.path().join("sr.png");
    let o = mmsr(&["sr", "--checkpoint", s(&ckpt), "--input", s(&lr), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}
