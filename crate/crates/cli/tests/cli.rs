use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsglab::commands::{CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE, SUMMARY_FILE};
use gsglab::manifest::RunManifest;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "\
[data]
per_class = 16

[train]
epochs = 3
batch_size = 16

[eval]
every = 1
probe_epochs = 20
";

fn gsglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsglab"))
        .args(args)
        .env("GSGLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[train]\nepochs = 1\nlearnig_rate = 0.1\n",
    );
    let out = gsglab(&["train", "-c", s(&cfg), "-o", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learnig_rate"), "{}", stderr(&out));
}

#[test]
fn train_writes_one_metrics_row_per_epoch_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = gsglab(&["train", "-c", s(&cfg), "-o", s(out_dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let metrics = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,loss,lr,collapse,knn_acc,case1,case2,case3,case4"
    );
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(
        fs::read(a.join(METRICS_FILE)).unwrap(),
        fs::read(b.join(METRICS_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );

    let manifest: RunManifest =
        serde_json::from_slice(&fs::read(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.knn_metric, "cosine");
    assert_eq!(manifest.total_updates, 3 * manifest.steps_per_epoch);

    // The manifest alone reproduces the run.
    let c = dir.path().join("c");
    let out = gsglab(&["train", "-c", s(&a.join(MANIFEST_FILE)), "-o", s(&c)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(a.join(METRICS_FILE)).unwrap(),
        fs::read(c.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn eval_prints_four_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run = dir.path().join("run");
    assert!(gsglab(&["train", "-c", s(&cfg), "-o", s(&run)])
        .status
        .success());
    let out = gsglab(&[
        "eval",
        "-k",
        "3",
        "--ckpt",
        s(&run.join(CHECKPOINT_FILE)),
        "-c",
        s(&cfg),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(fields.len(), 4, "{line}");
    assert_eq!(fields[0], "3");
    for f in &fields[1..] {
        let v: f64 = f.parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }
}

fn random_csv(path: &Path, classes: usize, per_class: usize, d: usize, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut f = fs::File::create(path).unwrap();
    let header: Vec<String> = (0..d)
        .map(|j| format!("x{j}"))
        .chain(["label".into()])
        .collect();
    writeln!(f, "{}", header.join(",")).unwrap();
    for i in 0..classes * per_class {
        let row: Vec<String> = (0..d)
            .map(|_| format!("{}", r.random_range(-1.0..1.0)))
            .collect();
        writeln!(f, "{},{}", row.join(","), i % classes).unwrap();
    }
}

#[test]
fn untrained_checkpoint_gives_chance_knn() {
    let dir = tempfile::tempdir().unwrap();
    let (classes, per_class) = (4, 100);
    random_csv(&dir.path().join("noise.csv"), classes, per_class, 32, 9);
    let cfg = write(
        dir.path(),
        "noise.toml",
        &format!(
            "[data]\ncsv = \"{}\"\n\n[train]\nepochs = 0\n",
            s(&dir.path().join("noise.csv"))
        ),
    );
    let run = dir.path().join("run");
    let out = gsglab(&["train", "-c", s(&cfg), "-o", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = gsglab(&[
        "eval",
        "-k",
        "1",
        "--ckpt",
        s(&run.join(CHECKPOINT_FILE)),
        "-c",
        s(&cfg),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = String::from_utf8(out.stdout).unwrap();
    let knn: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    let n_test = (classes * per_class / 5) as f64;
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n_test).sqrt();
    assert!((knn - p).abs() < 3.0 * sigma, "{knn}");
}

#[test]
fn eval_rejects_a_checkpoint_of_another_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run = dir.path().join("run");
    assert!(gsglab(&["train", "-c", s(&cfg), "-o", s(&run)])
        .status
        .success());
    let wide = write(
        dir.path(),
        "wide.toml",
        "[data]\nd_in = 40\nper_class = 16\n",
    );
    let out = gsglab(&[
        "eval",
        "-k",
        "1",
        "--ckpt",
        s(&run.join(CHECKPOINT_FILE)),
        "-c",
        s(&wide),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_and_bad_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = gsglab(&[
        "eval",
        "-k",
        "1",
        "--ckpt",
        s(&dir.path().join("nope.txt")),
        "-c",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = gsglab(&[
        "sweep-batch",
        "-c",
        s(&cfg),
        "--sizes",
        "1,16",
        "-o",
        s(&dir.path().join("sw")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn read_summary(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn ablate_covers_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.toml",
        "[data]\nper_class = 8\n\n[train]\nepochs = 1\nbatch_size = 8\n",
    );
    let out_dir = dir.path().join("ablate");
    let out = gsglab(&["ablate", "-c", s(&cfg), "-o", s(&out_dir), "--seeds", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_summary(&out_dir.join(SUMMARY_FILE));
    assert_eq!(rows.len(), 4 * 2 * 3);
    assert_eq!(&rows[0][0], "symmetric");
    assert_eq!(&rows[0][1], "on");
    assert_eq!(&rows[3][1], "off");
    assert_eq!(&rows[23][0], "reverse");
    assert!(rows.iter().all(|r| &r[3] == "ok"));
    assert!(out_dir
        .join("gsg_pred-off_seed-2")
        .join(METRICS_FILE)
        .exists());
}

#[test]
fn sweep_batch_keeps_total_updates_equal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("sweep");
    let out = gsglab(&[
        "sweep-batch",
        "-c",
        s(&cfg),
        "--sizes",
        "8,16",
        "-o",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_summary(&out_dir.join(SUMMARY_FILE));
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "8");
    assert_eq!(&rows[1][0], "16");
    assert_eq!(&rows[0][3], &rows[1][3]);
    // 8 classes x 12 train samples, 96 / 16 = 6 steps per epoch.
    assert_eq!(&rows[0][3], "18");
}
