//! End-to-end runs of the `srdrm` binary.

use std::path::Path;
use std::process::{Command, Output};

use srdrm::datakit::ImageRgb8;

fn srdrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srdrm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn source_images(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        ImageRgb8::from_fn(64, 48, |x, y| [(x * 4) as u8, (y * 5) as u8, (i * 40 + x + y) as u8])
            .save(dir.join(format!("img{i}.png")))
            .unwrap();
    }
}

/// Three 64x48 pairs at 2x. `prepare-data` always targets 640x480, which is
/// too large for quick training runs, so this fixture goes through the library.
fn small_dataset(root: &Path) -> std::path::PathBuf {
    let src = root.join("src");
    source_images(&src, 3);
    let data = root.join("data");
    let options = srdrm::datakit::PrepareOptions {
        scales: vec![2],
        hr_width: 64,
        hr_height: 48,
        val_fraction: 0.0,
        ..Default::default()
    };
    srdrm::datakit::prepare_lr_sets(&src, &data, &options).unwrap();
    data
}

#[test]
fn prepare_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    source_images(&src, 2);
    let out = dir.path().join("out");
    let o = srdrm(&[
        "prepare-data",
        "--input",
        s(&src),
        "--output",
        s(&out),
        "--scales",
        "2,4",
        "--jpeg-quality",
        "90",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = srdrm::datakit::DatasetManifest::load(&out).unwrap();
    assert_eq!((m.scales.clone(), m.jpeg_quality, m.hr_width), (vec![2, 4], 90, 640));
    assert!(out.join("lr_4x/img0.png").is_file());
}

#[test]
fn train_eval_infer_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "learning_rate = 1e-3\ncheckpoint_every = 1\nseed = 5\n").unwrap();
    let out = dir.path().join("run");
    let o = srdrm(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--scale",
        "2",
        "--mode",
        "gen",
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--out",
        s(&out),
        "--tiny",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("generator_final.ckpt");
    assert!(ckpt.is_file() && out.join("generator_epoch_0002.ckpt").is_file());

    let report = dir.path().join("report.txt");
    let o = srdrm(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "train",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("report.txt.csv")).unwrap();
    assert!(csv.starts_with("id,psnr,ssim,uiqm\n"));
    assert_eq!(csv.lines().count(), 4);

    let input = data.join("lr_2x/img0.png");
    let output = dir.path().join("up.png");
    let o = srdrm(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&input),
        "--roi",
        "0,0,16,12",
        "--output",
        s(&output),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(image::image_dimensions(&output).unwrap(), (32, 24));
    let o = srdrm(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&input),
        "--roi",
        "30,0,16,12",
        "--output",
        s(&output),
    ]);
    assert_eq!(code(&o), 1);

    let o = srdrm(&["bench", "--ckpt", s(&ckpt), "--size", "16x12", "--iters", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("fps") && text.contains("width,height,scale,iters,mean_ms,median_ms,p95_ms,fps"));
}

#[test]
fn contract_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = s(&dir.path().join("run")).to_string();
    assert_eq!(
        code(&srdrm(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            &out
        ])),
        1
    );
    assert_eq!(
        code(&srdrm(&["train", "--data", s(&data), "--out", &out, "--scale", "3"])),
        1
    );
    assert_eq!(
        code(&srdrm(&[
            "eval",
            "--ckpt",
            "missing.ckpt",
            "--data",
            s(&data),
            "--split",
            "val",
            "--report",
            "r"
        ])),
        1
    );
    assert_eq!(code(&srdrm(&["bench", "--ckpt", "x", "--size", "12by8"])), 1);
    assert_eq!(code(&srdrm(&["frobnicate"])), 1);
    assert_eq!(code(&srdrm(&["--help"])), 0);
}

#[test]
fn numeric_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("diverge.toml");
    std::fs::write(&cfg, "learning_rate = 1e36\n").unwrap();
    let out = s(&dir.path().join("run")).to_string();
    let o = srdrm(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        &out,
        "--scale",
        "2",
        "--epochs",
        "10",
        "--tiny",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}
