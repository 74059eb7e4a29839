use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::{DType, Device};
use splice_core::cli::RunManifest;
use splice_core::distillation::{knn, read_pairs, DescriptorIndex};
use splice_core::image::ImageTensor;
use splice_core::synthetic::{noise_image, subject_set};

const TINY: [&str; 6] = ["--vit-arch", "tiny", "--vit-weights", "random:7", "--vit-resize", "32"];

fn splice(args: &[&str], extra_env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_splice"));
    cmd.args(args).env_remove("SPLICE_DEVICE").env_remove("SPLICE_VIT_WEIGHTS").env("RUST_LOG", "warn");
    for (k, v) in extra_env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn write_dataset(dir: &Path, n: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (id, img) in subject_set(n, size, 4, &Device::Cpu, DType::F32).unwrap() {
        img.save_png(dir.join(id)).unwrap();
    }
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn splice_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let (s, a) = (fixture("structure.png"), fixture("appearance.png"));
    let mut args = vec!["splice", "--structure", &s, "--appearance", &a, "--iterations", "2", "--seed", "3"];
    let od = p(&out_dir);
    args.extend(["--out-dir", &od]);
    args.extend(TINY);
    let stdout = ok(&splice(&args, &[]));
    assert!(stdout.contains("seed.train: 3"), "{stdout}");
    for f in ["result.png", "checkpoint.safetensors", "losses.csv", "manifest.json"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let result = ImageTensor::load(out_dir.join("result.png"), &Device::Cpu, DType::F32).unwrap();
    assert_eq!((result.height(), result.width()), (128, 128));
    let manifest = RunManifest::load(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.inputs.len(), 2);
    assert_eq!(manifest.inputs[0].sha256.len(), 64);
}

#[test]
fn missing_inputs_are_io_errors_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = p(&tmp.path().join("nope.png"));
    let od = p(&tmp.path().join("run"));
    let s = fixture("structure.png");
    let mut args = vec!["splice", "--structure", &s, "--appearance", &missing, "--out-dir", &od];
    args.extend(TINY);
    let out = splice(&args, &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope.png"), "{}", stderr(&out));
}

#[test]
fn unsupported_devices_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let od = p(&tmp.path().join("run"));
    let (s, a) = (fixture("structure.png"), fixture("appearance.png"));
    let mut args = vec!["splice", "--structure", &s, "--appearance", &a, "--out-dir", &od];
    args.extend(TINY);
    let out = splice(&args, &[("SPLICE_DEVICE", "cuda")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cuda"));
}

#[test]
fn distill_pairs_are_mutual_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 10, 32);
    let run = |out: &Path, k: &str| {
        let (d, o) = (p(&data), p(out));
        let mut args = vec!["distill", "--data-dir", &d, "--k", k, "--window", "2", "--out", &o];
        args.extend(TINY);
        splice(&args, &[])
    };
    let first = tmp.path().join("a/pairs.tsv");
    let second = tmp.path().join("b/pairs.tsv");
    ok(&run(&first, "3"));
    ok(&run(&second, "3"));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let index = DescriptorIndex::load(first.parent().unwrap()).unwrap();
    let pairs = read_pairs(&first).unwrap();
    assert!(!pairs.is_empty());
    for (a, b) in &pairs {
        assert!(knn(&index, a, 3).unwrap().contains(b));
        assert!(knn(&index, b, 3).unwrap().contains(a));
    }

    let out = run(&tmp.path().join("c/pairs.tsv"), "10");
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn bad_pair_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 3, 32);
    let train = |pairs: &Path| {
        let (pp, d, o) = (p(pairs), p(&data), p(&tmp.path().join("out")));
        let mut args = vec!["splicenet-train", "--pairs", &pp, "--data-dir", &d, "--out-dir", &o, "--iterations", "1"];
        args.extend(TINY);
        splice(&args, &[])
    };
    let empty = tmp.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let out = train(&empty);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));

    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "img_000.png\timg_001.png\nimg_002.png\n").unwrap();
    let out = train(&bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.tsv:2"), "{}", stderr(&out));
}

fn train_small(tmp: &Path) -> PathBuf {
    // augmentation crops to 95%, and the learned distance needs at least 32 px
    let data = tmp.join("data");
    write_dataset(&data, 4, 48);
    let pairs = tmp.join("pairs.tsv");
    std::fs::write(&pairs, "img_000.png\timg_001.png\nimg_001.png\timg_000.png\nimg_002.png\timg_003.png\n").unwrap();
    let (pp, d, o) = (p(&pairs), p(&data), p(&tmp.join("train")));
    let mut args = vec!["splicenet-train", "--pairs", &pp, "--data-dir", &d, "--out-dir", &o, "--iterations", "2"];
    args.extend(TINY);
    ok(&splice(&args, &[]));
    tmp.join("train/checkpoints/final.safetensors")
}

#[test]
fn splicenet_train_resume_run_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_small(tmp.path());
    assert!(ckpt.is_file());
    let losses = std::fs::read_to_string(tmp.path().join("train/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    // resume continues the counter
    let (pp, d, o, c) = (
        p(&tmp.path().join("pairs.tsv")),
        p(&tmp.path().join("data")),
        p(&tmp.path().join("resumed")),
        p(&ckpt),
    );
    let mut args = vec![
        "splicenet-train", "--pairs", &pp, "--data-dir", &d, "--out-dir", &o, "--iterations", "3", "--resume", &c,
    ];
    args.extend(TINY);
    ok(&splice(&args, &[]));
    let resumed = std::fs::read_to_string(tmp.path().join("resumed/losses.csv")).unwrap();
    let rows: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    // rows carry the 0-based step index, so the third step is row 2
    assert!(rows[0].starts_with("2,"), "{resumed}");

    // inference keeps the structure's size and reports its latency
    let s = p(&tmp.path().join("data/img_000.png"));
    let a = p(&tmp.path().join("data/img_002.png"));
    let out_png = tmp.path().join("out.png");
    let op = p(&out_png);
    let stdout = ok(&splice(
        &["splicenet-run", "--checkpoint", &c, "--structure", &s, "--appearance", &a, "--out", &op],
        &[],
    ));
    assert!(stdout.contains("inference_seconds"));
    let img = ImageTensor::load(&out_png, &Device::Cpu, DType::F32).unwrap();
    assert_eq!((img.height(), img.width()), (48, 48));

    // modes -> token file -> splicenet-run
    let modes_dir = tmp.path().join("modes");
    let md = p(&modes_dir);
    let mut args = vec!["modes", "--data-dir", &d, "--k", "2", "--checkpoint", &c, "--structures", &s, "--out-dir", &md];
    args.extend(TINY);
    ok(&splice(&args, &[]));
    assert!(modes_dir.join("modes.json").is_file());
    assert!(modes_dir.join("mode_grid.png").is_file());
    let token = p(&modes_dir.join("mode_0.token.json"));
    let mode_png = p(&tmp.path().join("mode.png"));
    ok(&splice(
        &["splicenet-run", "--checkpoint", &c, "--structure", &s, "--token-file", &token, "--out", &mode_png],
        &[],
    ));

    // interpolation sweep
    let interp = tmp.path().join("interp");
    let ip = p(&interp);
    ok(&splice(
        &["interpolate", "--checkpoint", &c, "--structure", &s, "--appearance", &a, "--out-dir", &ip, "--alphas", "0,0.5,1"],
        &[],
    ));
    for f in ["alpha_0.png", "alpha_2.png", "grid.png", "interpolation.csv"] {
        assert!(interp.join(f).is_file(), "missing {f}");
    }

    // reconstruction report with a mean row
    let csv = tmp.path().join("recon.csv");
    let cp = p(&csv);
    let stdout = ok(&splice(
        &["eval-recon", "--checkpoint", &c, "--image-dir", &d, "--out-csv", &cp, "--perceptual", "mse"],
        &[],
    ));
    assert!(stdout.contains("mean_mse"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn invert_writes_one_image_per_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("target.png");
    noise_image(1, 32, &Device::Cpu, DType::F32).unwrap().save_png(&target).unwrap();
    let (t, o) = (p(&target), p(&tmp.path().join("inv")));
    let mut args = vec!["invert", "--target", &t, "--layers", "1,4", "--steps", "2", "--out-dir", &o];
    args.extend(TINY);
    ok(&splice(&args, &[]));
    for f in ["layer_1.png", "layer_4.png", "grid.png", "trace.csv", "manifest.json"] {
        assert!(tmp.path().join("inv").join(f).is_file(), "missing {f}");
    }
    let mut args = vec!["invert", "--target", &t, "--selector", "keys@9", "--steps", "1", "--out-dir", &o];
    args.extend(TINY);
    assert_eq!(splice(&args, &[]).status.code(), Some(2));
}
