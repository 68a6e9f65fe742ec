use std::path::Path;
use std::process::{Command, Output};

use rainforge::data::dataset::synthetic_pairs;
use rainforge::data::{save_image, RainParams};

fn rainforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rainforge")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `n` procedural 24x24 clean images into `dir`.
fn scenes(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for p in synthetic_pairs(n, 24, 0, 1, &RainParams::default()).unwrap() {
        save_image(&p.clean, &dir.join(&p.name)).unwrap();
    }
}

#[test]
fn eval_of_identical_directories_is_clamped_and_perfect() {
    let root = tempfile::tempdir().unwrap();
    let (clean, copy) = (root.path().join("clean"), root.path().join("copy"));
    scenes(&clean, 3);
    std::fs::create_dir_all(&copy).unwrap();
    for entry in std::fs::read_dir(&clean).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, copy.join(path.file_name().unwrap())).unwrap();
    }
    let csv = root.path().join("metrics.csv");
    let out = rainforge(&["eval", "--clean", s(&clean), "--restored", s(&copy), "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "filename,psnr_db,ssim");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4], "mean,100.0,1.0");
}

#[test]
fn synth_without_rain_copies_bytes() {
    let root = tempfile::tempdir().unwrap();
    let (clean, out_dir) = (root.path().join("clean"), root.path().join("rainy"));
    scenes(&clean, 2);
    let out = rainforge(&["synth", "--clean", s(&clean), "--out", s(&out_dir), "--alpha", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for entry in std::fs::read_dir(&clean).unwrap() {
        let path = entry.unwrap().path();
        let twin = out_dir.join(path.file_name().unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(twin).unwrap());
    }

    let rainy_dir = root.path().join("rainy2");
    let out = rainforge(&["synth", "--clean", s(&clean), "--out", s(&rainy_dir), "--seed", "4"]);
    assert!(out.status.success());
    let first = std::fs::read_dir(&clean).unwrap().next().unwrap().unwrap().path();
    assert_ne!(std::fs::read(&first).unwrap(), std::fs::read(rainy_dir.join(first.file_name().unwrap())).unwrap());
}

#[test]
fn gradcheck_reports_and_succeeds() {
    let out = rainforge(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.lines().any(|l| l.starts_with("ok   conv2d ")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn train_then_derain_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    let cfg = root.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"base_channels": 4, "mab_per_level": 1}, "data": {"source": {"kind": "synthetic", "train": 8, "val": 2, "size": 24}}}"#).unwrap();
    let out = rainforge(&["train", "--config", s(&cfg), "--out", s(&run), "--iters", "4", "--val-every", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("iter,loss,lr,val_psnr,val_ssim\n"));

    let out = rainforge(&["train", "--out", s(&run), "--resume", s(&run.join("latest.ckpt")), "--iters", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 7);

    let (clean, restored) = (root.path().join("clean"), root.path().join("restored"));
    scenes(&clean, 2);
    let out = rainforge(&["derain", "--in", s(&clean), "--out", s(&restored), "--ckpt", s(&run.join("best.ckpt"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&restored).unwrap().count(), 2);
}

#[test]
fn bad_input_fails_with_a_message() {
    let root = tempfile::tempdir().unwrap();
    let out = rainforge(&["eval", "--clean", "/nonexistent/a", "--restored", "/nonexistent/b"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = rainforge(&["gradcheck", "--bogus"]);
    assert!(!out.status.success());

    let cfg = root.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"base_channels": "eight"}}"#).unwrap();
    let out = rainforge(&["train", "--config", s(&cfg), "--out", s(root.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let out = Command::new(env!("CARGO_BIN_EXE_rainforge"))
        .args(["gradcheck"])
        .env("RAINFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
