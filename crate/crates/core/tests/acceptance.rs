//! Acceptance criteria 1-10. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdrm::datakit::{prepare_lr_sets, ImageRgb8, PrepareOptions, Split};
use srdrm::losses::check::{check_generator_objective, check_loss_term, LossTerm};
use srdrm::losses::{perceptual_redmean_loss, LossWeights};
use srdrm::metrics::{psnr, ssim, uiqm};
use srdrm::model::{
    build_discriminator, build_generator, Checkpoint, DiscriminatorConfig, Generator, GeneratorConfig, ModelError,
};
use srdrm::tensor::gradcheck::{check_activation, check_batchnorm, check_conv2d, check_deconv2d, Probes};
use srdrm::tensor::{Activation, BnMode};
use srdrm::train::{bench, eval_report, train_adversarial, train_generative, TrainConfig, TrainMode, TrainOutcome};
use srdrm::{Shape4, Tensor4};

const SEEDS: u64 = 20;
const STEP: f64 = 1e-3;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn max_over(seeds: u64, f: impl Fn(u64) -> f64) -> f64 {
    (0..seeds).map(f).fold(0.0, f64::max)
}

fn criterion_1() -> String {
    let started = Instant::now();
    let mut worst_op = 0.0f64;
    let mut report = Vec::new();
    let mut op = |name: &str, f: &dyn Fn(u64) -> f64| {
        let e = max_over(SEEDS, f);
        report.push(format!("{name} {e:.1e}"));
        worst_op = worst_op.max(e);
        assert!(e <= 1e-4, "{name}: relative error {e:e} exceeds 1e-4");
    };
    op("conv2d", &|s| check_conv2d(s, STEP).unwrap());
    op("deconv2d", &|s| check_deconv2d(s, STEP).unwrap());
    op("bn_train", &|s| check_batchnorm(s, BnMode::Train, STEP).unwrap());
    op("bn_infer", &|s| check_batchnorm(s, BnMode::Infer, STEP).unwrap());
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("lrelu", Activation::LeakyRelu(Activation::DEFAULT_LEAKY_SLOPE)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        op(name, &|s| check_activation(s, kind, STEP).unwrap());
    }
    for (name, term) in [
        ("L2", LossTerm::Global),
        ("redmean", LossTerm::Redmean),
        ("content", LossTerm::Content),
        ("adversarial", LossTerm::Adversarial),
    ] {
        op(name, &|s| check_loss_term(term, s, STEP).unwrap());
    }

    // Composed tiny-profile objective: alternate plain and adversarial instances.
    let mut composed = 0.0f64;
    let mut checked = 0;
    for seed in 0..SEEDS {
        let weights = LossWeights {
            lambda_adv: if seed % 2 == 0 { 0.1 } else { 0.0 },
            ..LossWeights::default()
        };
        let r = check_generator_objective(seed, STEP, &Probes::Sample { count: 4, seed }, &weights).unwrap();
        assert!(r.checked > 0, "seed {seed}: nothing compared");
        composed = composed.max(r.max_rel_error);
        checked += r.checked;
    }
    assert!(
        composed <= 1e-3,
        "composed objective: relative error {composed:e} exceeds 1e-3"
    );
    let elapsed = started.elapsed();
    assert!(elapsed <= Duration::from_secs(120), "gradient suite took {elapsed:?}");
    format!(
        "{SEEDS} seeds each, max op/loss error {worst_op:.1e} ({}); composed {composed:.1e} over {checked} probes; {:.1}s",
        report.join(", "),
        elapsed.as_secs_f64()
    )
}

fn criterion_2() -> String {
    let extents = [(8, 8), (12, 8), (10, 14), (16, 12), (20, 15), (7, 9)];
    let mut checked = 0;
    for exp in 1..=3u32 {
        let g = build_generator(&GeneratorConfig::full(exp), u64::from(exp)).unwrap();
        for &(w, h) in &extents {
            let y = g.forward(&Tensor4::zeros(Shape4::new(1, 3, h, w))).unwrap();
            let k = 1usize << exp;
            assert_eq!(y.shape(), Shape4::new(1, 3, h * k, w * k), "n={exp} input {w}x{h}");
            checked += 1;
        }
    }
    let d = build_discriminator(&DiscriminatorConfig::default(), 0).unwrap();
    for &(w, h) in &[(16, 16), (32, 16), (48, 32), (64, 48), (80, 64), (640, 480)] {
        let x = Tensor4::zeros(Shape4::new(1, 3, h, w));
        let y = d.forward(&x, &x).unwrap();
        assert_eq!(
            y.shape(),
            Shape4::new(1, 1, h / 16, w / 16),
            "discriminator input {w}x{h}"
        );
        checked += 1;
    }
    format!("{checked} extents exact; 640x480 pair -> 40x30 validity map")
}

/// Tiny-profile overfit configuration shared by criteria 3 and 9.
fn overfit_config() -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Gen,
        scale: 2,
        tiny: true,
        epochs: 250,
        batch_size: 4,
        learning_rate: 1e-3,
        checkpoint_every: 125,
        seed: 11,
        ..TrainConfig::default()
    }
}

struct OverfitRun {
    _dir: tempfile::TempDir,
    manifest_root: PathBuf,
    out: PathBuf,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn overfit_run(name: &str) -> OverfitRun {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_dataset(dir.path(), 8, 64, 48, &[2], 5);
    let out = dir.path().join(name);
    let started = Instant::now();
    let outcome = train_generative(&overfit_config(), &manifest, &out).unwrap();
    OverfitRun {
        manifest_root: manifest.root.clone(),
        _dir: dir,
        out,
        outcome,
        elapsed: started.elapsed(),
    }
}

fn first_overfit() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| overfit_run("first"))
}

fn criterion_3() -> String {
    let run = first_overfit();
    let series = run.outcome.log.global_series();
    assert!(series.len() <= 500, "{} steps", series.len());
    let (first, last) = (series[0], *series.last().unwrap());
    let drop = 1.0 - last / first;
    assert!(drop >= 0.9, "L2 term fell {:.1}% ({first} -> {last})", drop * 100.0);
    let manifest = srdrm::datakit::DatasetManifest::load(&run.manifest_root).unwrap();
    assert_eq!(manifest.train.len(), 8);
    let report = eval_report(&run.outcome.generator, &manifest, Split::Train).unwrap();
    assert_eq!(report.rows.len(), 8);
    let mean = report.means.unwrap().psnr;
    assert!(mean >= 30.0, "mean training PSNR {mean:.2} dB");
    assert!(
        run.elapsed <= Duration::from_secs(600),
        "overfit run took {:?}",
        run.elapsed
    );
    format!(
        "{} steps, L2 {first:.3} -> {last:.3} ({:.1}% drop), train PSNR {mean:.2} dB, {:.1}s",
        series.len(),
        drop * 100.0,
        run.elapsed.as_secs_f64()
    )
}

fn criterion_4() -> String {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_dataset(dir.path(), 8, 64, 48, &[2], 9);
    let config = TrainConfig {
        mode: TrainMode::Gan,
        scale: 2,
        tiny: true,
        epochs: 100,
        batch_size: 4,
        checkpoint_every: 100,
        seed: 4,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train_adversarial(&config, &manifest, dir.path().join("gan")).unwrap();
    let elapsed = started.elapsed();
    let steps = &outcome.log.steps;
    assert_eq!(steps.len(), 200);
    let mut run = 0;
    let mut longest = 0;
    for r in steps {
        let values = [
            r.terms.total,
            r.terms.global,
            r.terms.content,
            r.terms.perceptual,
            r.terms.adversarial.unwrap(),
            r.d_loss.unwrap(),
        ];
        assert!(values.iter().all(|v| v.is_finite()), "step {}: {values:?}", r.step);
        let saturated = [r.d_real.unwrap(), r.d_fake.unwrap()]
            .iter()
            .all(|&m| m == 0.0 || m == 1.0);
        run = if saturated { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    assert!(longest < 100, "{longest} consecutive saturated steps");
    assert!(elapsed <= Duration::from_secs(600), "took {elapsed:?}");
    let first_d = steps[0].d_loss.unwrap();
    format!(
        "200 GAN steps finite; d_loss {first_d:.3} -> {:.3}; longest saturated run {longest}; {:.1}s",
        steps.last().unwrap().d_loss.unwrap(),
        elapsed.as_secs_f64()
    )
}

fn criterion_5() -> String {
    let black = ImageRgb8::filled(32, 32, [0; 3]);
    let white = ImageRgb8::filled(32, 32, [255; 3]);
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    let a = ImageRgb8::filled(32, 32, [60, 120, 200]);
    let b = ImageRgb8::filled(32, 32, [76, 104, 216]);
    let p16 = psnr(&a, &b).unwrap();
    assert!((p16 - 24.0484).abs() <= 1e-3, "{p16}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let img = ImageRgb8::from_fn(24, 18, |_, _| [rng.random(), rng.random(), rng.random()]);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }
    let uniform = ssim(
        &ImageRgb8::filled(32, 32, [128; 3]),
        &ImageRgb8::filled(32, 32, [64; 3]),
    )
    .unwrap();
    assert!((uniform - 0.8001).abs() <= 1e-3, "{uniform}");

    #[derive(serde::Deserialize)]
    struct Reference {
        name: String,
        ssim: f64,
        uiqm: f64,
    }
    let text = fs::read_to_string(data_dir().join("oracle/metrics_reference.json")).unwrap();
    let refs: Vec<Reference> = serde_json::from_str(&text).unwrap();
    assert!(refs.len() >= 10);
    let (mut ds, mut du) = (0.0f64, 0.0f64);
    for r in &refs {
        let load = |n: &str| ImageRgb8::load(data_dir().join("natural").join(format!("{n}.png"))).unwrap();
        let img = load(&r.name);
        let s = ssim(&img, &load(&format!("{}_distorted", r.name))).unwrap();
        let q = uiqm(&img).unwrap().uiqm;
        ds = ds.max((s - r.ssim).abs());
        du = du.max((q - r.uiqm).abs());
    }
    assert!(ds <= 1e-6, "SSIM off by {ds:e}");
    assert!(du <= 1e-4, "UIQM off by {du:e}");
    format!(
        "PSNR 0 dB / {p16:.4} dB, SSIM uniform {uniform:.4}; {} natural images: SSIM max diff {ds:.1e}, UIQM max diff {du:.1e}",
        refs.len()
    )
}

fn criterion_6() -> String {
    let px = |r: f32, g: f32, b: f32| Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![r, g, b]).unwrap();
    let red = perceptual_redmean_loss(&px(1.0, -1.0, -1.0), &px(-1.0, -1.0, -1.0)).unwrap();
    let blue = perceptual_redmean_loss(&px(-1.0, -1.0, 1.0), &px(-1.0, -1.0, -1.0)).unwrap();
    assert_eq!(red, 639.5);
    assert_eq!(blue, 767.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let x = Tensor4::from_fn(Shape4::new(1, 3, h, w), |_| rng.random_range(-1.0f32..=1.0));
        assert_eq!(perceptual_redmean_loss(&x, &x).unwrap(), 0.0);
    }
    format!("pure red {red}, pure blue {blue}; zero at identity on 100 random images")
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7() -> String {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    common::scene(640, 480, 1).save(src.join("exact.png")).unwrap();
    common::scene(1024, 700, 2).save(src.join("oversized.png")).unwrap();
    let options = PrepareOptions {
        val_fraction: 0.0,
        ..PrepareOptions::default()
    };
    let m = prepare_lr_sets(&src, dir.path().join("a"), &options).unwrap();
    prepare_lr_sets(&src, dir.path().join("b"), &options).unwrap();
    assert_eq!(m.train.len(), 2);
    for p in &m.train {
        let dims = |rel: &str| image::image_dimensions(m.resolve(rel)).unwrap();
        assert_eq!(dims(&p.hr), (640, 480), "{}", p.id);
        assert_eq!(dims(p.lr(2).unwrap()), (320, 240));
        assert_eq!(dims(p.lr(4).unwrap()), (160, 120));
        assert_eq!(dims(p.lr(8).unwrap()), (80, 60));
    }
    let a = tree_bytes(&dir.path().join("a"));
    let b = tree_bytes(&dir.path().join("b"));
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
    format!(
        "640x480 and 1024x700 inputs -> HR 640x480, LR 320x240/160x120/80x60; {} files byte-identical on regeneration",
        a.len()
    )
}

fn criterion_8() -> String {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator(&GeneratorConfig::tiny(2), 8).unwrap();
    let path = dir.path().join("g.ckpt");
    g.save(&path).unwrap();
    let loaded = Generator::load_inferred(&path).unwrap();
    let x = Tensor4::from_fn(Shape4::new(2, 3, 10, 12), |i| ((i * 37 % 200) as f32 / 100.0) - 1.0);
    let (ya, yb) = (g.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(ModelError::Format(_))));
    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(ModelError::Corrupt { .. })));
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Generator::load_inferred(&path),
        Err(ModelError::Corrupt { .. })
    ));

    let full = build_generator(&GeneratorConfig::full(3), 0).unwrap();
    let size = full.to_checkpoint().to_bytes().len();
    let mb = size as f64 / (1024.0 * 1024.0);
    assert!((2.0..=24.0).contains(&mb), "full 8x checkpoint is {mb:.2} MB");
    format!(
        "bitwise round trip; bad magic -> format error, flipped byte -> corrupt entry; full 8x checkpoint {mb:.2} MB"
    )
}

fn criterion_9() -> String {
    let first = first_overfit();
    let second = overfit_run("second");
    assert_eq!(first.outcome.log.steps, second.outcome.log.steps);
    assert_eq!(first.outcome.log.epochs, second.outcome.log.epochs);
    let read = |dir: &Path, name: &str| fs::read(dir.join(name)).unwrap();
    assert_eq!(read(&first.out, "train_log.csv"), read(&second.out, "train_log.csv"));
    assert_eq!(first.outcome.checkpoints.len(), overfit_config().expected_checkpoints());
    assert_eq!(first.outcome.checkpoints.len(), second.outcome.checkpoints.len());
    for (a, b) in first.outcome.checkpoints.iter().zip(&second.outcome.checkpoints) {
        assert_eq!(a.file_name(), b.file_name());
        assert!(fs::read(a).unwrap() == fs::read(b).unwrap(), "{} differs", a.display());
    }
    format!(
        "two seeded runs: identical TrainLog ({} steps) and {} byte-identical checkpoints",
        second.outcome.log.steps.len(),
        second.outcome.checkpoints.len()
    )
}

fn criterion_10() -> String {
    let g2 = build_generator(&GeneratorConfig::tiny(1), 0).unwrap();
    let g8 = build_generator(&GeneratorConfig::tiny(3), 0).unwrap();
    let r2 = bench(&g2, 40, 30, 10).unwrap();
    let r8 = bench(&g8, 40, 30, 10).unwrap();
    assert!(
        r8.mean_ms > r2.mean_ms,
        "8x {:.3} ms vs 2x {:.3} ms",
        r8.mean_ms,
        r2.mean_ms
    );
    assert!((r2.fps - 1000.0 / r2.mean_ms).abs() < 1e-9);
    format!(
        "40x30 input: 2x {:.2} ms, 8x {:.2} ms per frame",
        r2.mean_ms, r8.mean_ms
    )
}

type Criterion = (&'static str, fn() -> String);

fn main() {
    // Keep assertion messages on the criterion line instead of the default hook.
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 10] = [
        ("gradient suite", criterion_1),
        ("scale law", criterion_2),
        ("overfit run", criterion_3),
        ("adversarial smoke run", criterion_4),
        ("metric oracles", criterion_5),
        ("redmean loss", criterion_6),
        ("dataset pipeline", criterion_7),
        ("checkpoint", criterion_8),
        ("determinism", criterion_9),
        ("bench ordering", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {id:>2} FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
