//! End-to-end tests of the `dmcnn` binary: workflow wiring, exit codes,
//! idempotence, and the restoration identities.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmcnn_core::imaging::{load_luma, save_luma, ImagePlane};
use dmcnn_core::net::{Model, NetworkConfig};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dmcnn"));
    cmd.env("DMCNN_LOG", "quiet");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dmcnn-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn textured_plane(w: usize, h: usize, seed: u64) -> ImagePlane {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(w, h, |x, y| {
        let base = 110.0 + 70.0 * ((x as f64 / 6.0).sin() * (y as f64 / 8.0).cos());
        (base + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0).round()
    })
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn degrade_round_trip_and_idempotence() {
    let dir = workdir("degrade");
    let input = dir.join("in.png");
    save_luma(&textured_plane(64, 48, 1), &input).unwrap();
    let out_png = dir.join("out.png");

    let r = run(&["degrade", "--input", &s(&input), "--output", &s(&out_png), "--qf", "10"]);
    assert_eq!(code(&r), 0, "{r:?}");
    let first = std::fs::read(&out_png).unwrap();

    // re-running with identical inputs writes identical bytes
    let r = run(&["degrade", "--input", &s(&input), "--output", &s(&out_png), "--qf", "10"]);
    assert_eq!(code(&r), 0);
    assert_eq!(std::fs::read(&out_png).unwrap(), first);
}

#[test]
fn degrade_qf100_changes_pixels_by_at_most_one() {
    let dir = workdir("qf100");
    let input = dir.join("in.png");
    let clean = textured_plane(56, 56, 2);
    save_luma(&clean, &input).unwrap();
    let out_png = dir.join("out.png");
    let r = run(&["degrade", "--input", &s(&input), "--output", &s(&out_png), "--qf", "100"]);
    assert_eq!(code(&r), 0);
    let degraded = load_luma(&out_png).unwrap();
    assert!(degraded.max_abs_diff(&clean) <= 1.0);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = workdir("codes");
    // missing input file: data error
    let r = run(&["degrade", "--input", &s(&dir.join("none.png")), "--output", &s(&dir.join("x.png")), "--qf", "10"]);
    assert_eq!(code(&r), 2);
    // out-of-range qf: usage error
    let input = dir.join("in.png");
    save_luma(&textured_plane(16, 16, 3), &input).unwrap();
    let r = run(&["degrade", "--input", &s(&input), "--output", &s(&dir.join("x.png")), "--qf", "0"]);
    assert_eq!(code(&r), 1);
    // empty eval dir: data error
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = run(&["eval", "--clean-dir", &s(&empty), "--qf", "10"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn zero_weight_checkpoint_restores_identically() {
    let dir = workdir("zero");
    let cfg = NetworkConfig {
        base_channels: 4,
        ..NetworkConfig::default()
    };
    let mut model: Model<f32> = Model::build(&cfg, 9).unwrap();
    for (name, p) in model.parameters_mut().iter_mut() {
        if name != "mix.r" {
            p.values = vec![0.0; p.values.len()];
        }
    }
    let ckpt = dir.join("zero.ckpt");
    model.save_checkpoint(&ckpt).unwrap();

    let input = dir.join("in.png");
    save_luma(&textured_plane(59, 43, 4), &input).unwrap();
    let deg = dir.join("deg.png");
    let dump = dir.join("deg.coeffs");
    let r = run(&[
        "degrade", "--input", &s(&input), "--output", &s(&deg), "--qf", "10",
        "--dump-coeffs", &s(&dump),
    ]);
    assert_eq!(code(&r), 0);

    let restored = dir.join("rest.png");
    let r = run(&[
        "restore", "--input", &s(&deg), "--coeffs", &s(&dump),
        "--checkpoint", &s(&ckpt), "--output", &s(&restored),
    ]);
    assert_eq!(code(&r), 0, "{r:?}");
    // zero residuals and in-range mixing make restoration the identity,
    // and the output keeps the odd input size
    assert_eq!(std::fs::read(&restored).unwrap(), std::fs::read(&deg).unwrap());
}

#[test]
fn restore_from_qf_matches_restore_from_dump() {
    let dir = workdir("requant");
    let cfg = NetworkConfig {
        base_channels: 4,
        ..NetworkConfig::default()
    };
    let model: Model<f32> = Model::build(&cfg, 10).unwrap();
    let ckpt = dir.join("m.ckpt");
    model.save_checkpoint(&ckpt).unwrap();

    let input = dir.join("in.png");
    save_luma(&textured_plane(64, 48, 5), &input).unwrap();
    let deg = dir.join("deg.png");
    let dump = dir.join("deg.coeffs");
    assert_eq!(
        code(&run(&[
            "degrade", "--input", &s(&input), "--output", &s(&deg), "--qf", "20",
            "--dump-coeffs", &s(&dump),
        ])),
        0
    );
    let via_dump = dir.join("a.png");
    let via_qf = dir.join("b.png");
    assert_eq!(
        code(&run(&["restore", "--input", &s(&deg), "--coeffs", &s(&dump), "--checkpoint", &s(&ckpt), "--output", &s(&via_dump)])),
        0
    );
    assert_eq!(
        code(&run(&["restore", "--input", &s(&deg), "--qf", "20", "--checkpoint", &s(&ckpt), "--output", &s(&via_qf)])),
        0
    );
    assert_eq!(
        std::fs::read(&via_dump).unwrap(),
        std::fs::read(&via_qf).unwrap()
    );
}

#[test]
fn eval_self_comparison_hits_the_sentinels() {
    let dir = workdir("evalself");
    let clean = dir.join("clean");
    std::fs::create_dir_all(&clean).unwrap();
    save_luma(&textured_plane(32, 32, 6), clean.join("a.png")).unwrap();
    let report = dir.join("report.csv");
    let out = bin()
        .args(["eval", "--clean-dir", &s(&clean), "--test-dir", &s(&clean), "--report", &s(&report)])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("100.00"), "{stdout}");
    assert!(stdout.contains("1.000"), "{stdout}");
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("filename,psnr,ssim,psnr_b\n"));
    assert!(csv.contains("a.png,100,1,"), "{csv}");
}

#[test]
fn eval_unpaired_file_is_a_data_error() {
    let dir = workdir("evalmiss");
    let clean = dir.join("clean");
    let test = dir.join("test");
    std::fs::create_dir_all(&clean).unwrap();
    std::fs::create_dir_all(&test).unwrap();
    save_luma(&textured_plane(16, 16, 7), clean.join("only.png")).unwrap();
    let r = run(&["eval", "--clean-dir", &s(&clean), "--test-dir", &s(&test)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8(r.stderr).unwrap().contains("only.png"));
}

#[test]
fn train_is_reproducible_and_checkpoint_loads() {
    let dir = workdir("train");
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..2 {
        save_luma(&textured_plane(48, 48, 20 + i), corpus.join(format!("c{i}.png"))).unwrap();
    }
    let cfg = dir.join("cfg.toml");
    std::fs::write(
        &cfg,
        "[network]\nbase_channels = 4\n\n[training]\nbatch_size = 2\nseed = 3\n\
         curriculum = [{ patch_size = 16, qf = 20, steps = 4 }]\n",
    )
    .unwrap();
    let ck1 = dir.join("a.ckpt");
    let ck2 = dir.join("b.ckpt");
    for out in [&ck1, &ck2] {
        let r = run(&["train", "--corpus", &s(&corpus), "--config", &s(&cfg), "--out", &s(out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());

    // flag overrides beat the config file
    let ck3 = dir.join("c.ckpt");
    let r = run(&[
        "train", "--corpus", &s(&corpus), "--config", &s(&cfg), "--out", &s(&ck3),
        "--curriculum", "16:20:2", "--seed", "4",
    ]);
    assert_eq!(code(&r), 0);
    assert_ne!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck3).unwrap());

    // mismatched warm start names the differing field and exits 2
    let other = NetworkConfig {
        base_channels: 8,
        ..NetworkConfig::default()
    };
    let wrong = dir.join("wrong.ckpt");
    Model::<f32>::build(&other, 0).unwrap().save_checkpoint(&wrong).unwrap();
    let r = run(&[
        "train", "--corpus", &s(&corpus), "--config", &s(&cfg), "--out", &s(&dir.join("d.ckpt")),
        "--init-checkpoint", &s(&wrong),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8(r.stderr).unwrap().contains("base_channels"));
}

#[test]
fn rf_report_agrees_and_meets_the_claim() {
    let out = run(&["rf-report"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("analytic 151x151, impulse oracle 151x151"), "{text}");
}
