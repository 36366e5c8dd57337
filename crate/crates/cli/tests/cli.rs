use std::path::Path;
use std::process::{Command, Output};

use hieratt::harness::ImageBuffer;
use hieratt::network::Model;

fn hieratt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hieratt"))
        .args(args)
        .env("HIERATT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path, name: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"train_images": 2, "train_size": 32, "val_images": 1, "val_size": 16,
            "val_every": 2, "schedule": [{"patch": 16, "batch": 1, "start": 0}]}}"#,
    )
    .unwrap();
    let out = dir.join(name);
    let o = hieratt(&[
        "train-toy",
        "--out",
        out.to_str().unwrap(),
        "--iters",
        "2",
        "--seed",
        "5",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn analyze_table_and_json() {
    let o = hieratt(&["analyze", "--config", "base", "--size", "64x64"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("total"), "{text}");

    let o = hieratt(&["analyze", "--config", "toy", "--size", "37x41", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["padded"], serde_json::json!([40, 48]));
    assert!(v["total_macs"].as_u64().unwrap() > 0);
}

#[test]
fn analyze_rejects_bad_arguments() {
    let o = hieratt(&["analyze", "--config", "huge", "--size", "64x64"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hieratt(&["analyze", "--config", "base", "--size", "64"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_single_op_and_unknown() {
    let o = hieratt(&["gradcheck", "--op", "gelu", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("[PASS] gelu"));
    let o = hieratt(&["gradcheck", "--op", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_fuse_denoise_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let weights = train_tiny(dir.path(), "m.iptw");
    assert!(Model::sidecar_path(&weights).exists());
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.iptw.log.json")).unwrap()).unwrap();
    assert_eq!(log["log"].as_array().unwrap().len(), 2);

    let fused = dir.path().join("f.iptw");
    let o = hieratt(&["fuse", "--in", weights.to_str().unwrap(), "--out", fused.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Model::load(&fused).unwrap().is_fused());

    let img = ImageBuffer::from_float(3, 13, 9, (0..351).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
    let input = dir.path().join("in.ppm");
    img.write_pnm(&input).unwrap();
    let mut outs = Vec::new();
    for (m, name) in [(&weights, "a.ppm"), (&fused, "b.ppm")] {
        let out = dir.path().join(name);
        let o = hieratt(&[
            "denoise",
            "--model",
            m.to_str().unwrap(),
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(ImageBuffer::read_pnm(&out).unwrap());
    }
    assert_eq!((outs[0].height(), outs[0].width()), (13, 9));
    // quantized outputs of the two forms agree to within one level
    let worst = outs[0]
        .samples()
        .iter()
        .zip(outs[1].samples())
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap();
    assert!(worst <= 1);
}

#[test]
fn seeded_training_writes_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(train_tiny(dir.path(), "a.iptw")).unwrap();
    let b = std::fs::read(train_tiny(dir.path(), "b.iptw")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn denoise_reports_missing_and_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = hieratt(&["denoise", "--model", "/nonexistent.iptw", "--in", "x.ppm", "--out", "y.ppm"]);
    assert!(!o.status.success());
    let weights = train_tiny(dir.path(), "m.iptw");
    let gray = dir.path().join("g.pgm");
    ImageBuffer::from_u8(1, 4, 4, vec![7; 16]).unwrap().write_pnm(&gray).unwrap();
    let o = hieratt(&[
        "denoise",
        "--model",
        weights.to_str().unwrap(),
        "--in",
        gray.to_str().unwrap(),
        "--out",
        dir.path().join("o.pgm").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_variable_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_hieratt"))
        .args(["analyze", "--config", "toy", "--size", "8x8"])
        .env("HIERATT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
