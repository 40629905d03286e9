use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use erasenet_core::data::{load_grayscale, save_image};
use erasenet_core::ImageBuffer;
use erasenet_testkit::{synthetic_pair, write_corpus};

fn erasenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erasenet"))
        .args(args)
        .env_remove("ERASENET_SEED")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Four 256x256 pairs: one patch each.
fn small_corpus(root: &Path) {
    write_corpus(root, 4, 256, 256, 40).unwrap();
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--variant", "4", "--width-scale", "0.125", "--epochs", "1", "--batch-size", "2",
        "--data", p(data), "--out", p(out),
    ];
    args.extend_from_slice(extra);
    erasenet(&args)
}

#[test]
fn gradcheck_passes_and_detects_a_fault() {
    let ok = erasenet(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let table = stdout(&ok);
    for op in ["conv2d 3x3", "conv_transpose2d", "batch_norm (train)", "max_pool2d", "mini EraseNet (train)"] {
        assert!(table.contains(op), "missing {op}:\n{table}");
    }
    assert!(table.contains("max-rel-err"));
    assert!(!table.contains("FAIL"));

    let bad = erasenet(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn extract_patches_writes_twelve_per_page() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 2, 300, 200, 1).unwrap();
    let out = dir.path().join("patches");
    let o = erasenet(&["extract-patches", "--in", p(&dir.path().join("noisy")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".pgm")).count(), 24);
    assert!(out.join("page000_p00.pgm").exists());
    assert!(out.join("page001_p11.pgm").exists());
    let patch = load_grayscale(out.join("page000_p05.pgm")).unwrap();
    assert_eq!(patch.dims(), (256, 256));
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 25);
    assert!(manifest.contains("page001_p11.pgm"));
}

#[test]
fn extract_patches_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("out");
    let o = erasenet(&["extract-patches", "--in", p(&empty), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("no images"));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().count() == 0);

    let mixed = dir.path().join("mixed");
    fs::create_dir(&mixed).unwrap();
    save_image(&ImageBuffer::filled(40, 30, 0.5), mixed.join("good.pgm")).unwrap();
    fs::write(mixed.join("broken.png"), b"not an image").unwrap();
    let o = erasenet(&["extract-patches", "--in", p(&mixed), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("broken.png"));
    assert!(out.join("good_p11.pgm").exists());
}

#[test]
fn train_smoke_determinism_and_default_lr() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = train_small(&data, &a, &["--seed", "7"]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert!(stderr(&oa).contains("lr=1e-4"), "{}", stderr(&oa));
    let ob = train_small(&data, &b, &["--seed", "7"]);
    assert_eq!(code(&ob), 0);
    let la = fs::read_to_string(a.join("loss.csv")).unwrap();
    let lb = fs::read_to_string(b.join("loss.csv")).unwrap();
    assert_eq!(la.lines().count(), 1);
    assert_eq!(la, lb);
    assert!(a.join("latest.ckpt").exists());
    assert!(a.join("best.ckpt").exists());
    assert_eq!(fs::read(a.join("latest.ckpt")).unwrap(), fs::read(b.join("latest.ckpt")).unwrap());

    // denoise with the fresh checkpoint
    let noisy = data.join("noisy");
    let odd = dir.path().join("odd.pgm");
    save_image(&synthetic_pair(100, 70, 3).0, &odd).unwrap();
    let ckpt = a.join("latest.ckpt");
    let out = dir.path().join("clean");
    let o = erasenet(&["denoise", "--ckpt", p(&ckpt), "--in", p(&odd), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let y = load_grayscale(out.join("odd.png")).unwrap();
    assert_eq!(y.dims(), (100, 70));

    let o = erasenet(&[
        "denoise", "--ckpt", p(&ckpt), "--in", p(&noisy), "--out", p(&out), "--mode", "patch", "--sharpen",
        "--orient-avg",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_grayscale(out.join("page003.png")).unwrap().dims(), (256, 256));

    let o = erasenet(&["denoise", "--ckpt", p(&ckpt), "--in", p(&odd), "--out", p(&out), "--variant", "3"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let o = erasenet(&["denoise", "--ckpt", p(&junk), "--in", p(&odd), "--out", p(&out)]);
    assert_eq!(code(&o), 1);

    // a run from another seed differs
    let c = dir.path().join("c");
    let oc = train_small(&data, &c, &["--seed", "8"]);
    assert_eq!(code(&oc), 0);
    assert_ne!(fs::read_to_string(c.join("loss.csv")).unwrap(), la);
}

#[test]
fn config_file_and_seed_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data);
    let cfg = dir.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# smoke run\nvariant = 4\nwidth_scale = 0.125\nepochs = 1\nbatch-size = 4\nlr = 2e-4\nseed = 3\ndata = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("o1");
    let o = erasenet(&["train", "--config", p(&cfg), "--out", p(&out), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("lr=2e-4") && err.contains("seed=3") && err.contains("batch-size=4"), "{err}");

    let o = Command::new(env!("CARGO_BIN_EXE_erasenet"))
        .args(["train", "--config", p(&cfg), "--out", p(&dir.path().join("o2"))])
        .env("ERASENET_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("seed=11"));

    let o = Command::new(env!("CARGO_BIN_EXE_erasenet"))
        .args(["train", "--config", p(&cfg), "--seed", "12", "--out", p(&dir.path().join("o3"))])
        .env("ERASENET_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("seed=12"));

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "colour = blue\n").unwrap();
    assert_eq!(code(&erasenet(&["train", "--config", p(&bad)])), 1);
}

#[test]
fn numerical_halt_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_corpus(&data);
    let out = dir.path().join("o");
    let o = train_small(&data, &out, &["--lr", "1e38"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn eval_reports_and_self_consistency() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 3, 64, 48, 9).unwrap();
    let clean = dir.path().join("clean");
    let noisy = dir.path().join("noisy");
    let report = dir.path().join("report.csv");

    let o = erasenet(&["eval", "--pred", p(&clean), "--truth", p(&clean), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().last().unwrap(), "mean,0e0,identical,1.000000");

    let o = erasenet(&["eval", "--pred", p(&noisy), "--truth", p(&clean), "--range", "8bit", "--out", p(&report)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&report).unwrap();
    let mean: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(mean[0], "mean");
    assert!(mean[1].parse::<f64>().unwrap() > 1.0);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&erasenet(&["eval", "--pred", p(&empty), "--truth", p(&clean), "--out", p(&report)])), 1);
    assert_eq!(code(&erasenet(&["eval", "--pred", p(&clean), "--truth", p(&clean)])), 1);

    let o = erasenet(&[
        "eval", "--from-mse", "3.02e-4,3.155e-4,18.83,15.39", "--range", "8bit", "--out", p(&report),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).is_empty());
    let psnrs: Vec<f64> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(psnrs.len(), 4);
    for (got, mse) in psnrs.iter().zip([3.02e-4, 3.155e-4, 18.83, 15.39]) {
        let want = 10.0 * (255.0f64 * 255.0 / mse).log10();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    for (got, table) in psnrs.iter().zip([83.33, 83.14, 35.38]) {
        assert!((got - table).abs() <= 0.1, "{got} vs {table}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&erasenet(&["train", "--bogus"])), 1);
    assert_eq!(code(&erasenet(&["nonsense"])), 1);
    assert_eq!(code(&erasenet(&[])), 1);
    assert_eq!(code(&erasenet(&["--help"])), 0);
    assert_eq!(code(&erasenet(&["train", "--variant", "5"])), 1);
}
