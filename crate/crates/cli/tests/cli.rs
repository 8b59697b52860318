use std::path::Path;
use std::process::{Command, Output};

use aswl::data::{encode_idx_images, encode_idx_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_mnist(dir: &Path, train: usize, test: usize) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut write = |prefix: &str, n: usize| {
        let pixels: Vec<u8> = (0..n * 784).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..10)).collect();
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(28, 28, &pixels)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
    };
    write("train", train);
    write("t10k", test);
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("mnist")).unwrap();
        write_mnist(&dir.path().join("mnist"), 48, 16);
        Self { dir }
    }

    fn path(&self, p: &str) -> std::path::PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_aswl"))
            .args(args)
            .env("ASWL_DATA_DIR", self.dir.path())
            .output()
            .unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--arch",
            "mnist-cnn",
            "--dataset",
            "mnist",
            "--val-size",
            "8",
            "--batch-size",
            "16",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn train_writes_reports() {
    let f = Fixture::new();
    let o = f.train("run", &["--epochs", "2", "--per-iteration"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("run/checkpoint.bin").is_file());

    let metrics = read(&f.path("run/metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "epoch,iteration,train_acc,val_acc,ce_loss,sparsity_reg,l2_term,global_pruned_ratio"
    );
    assert!(lines[2].starts_with("2,6,"));

    let layers = read(&f.path("run/layers.csv"));
    let lines: Vec<&str> = layers.lines().collect();
    assert_eq!(lines[0], "layer_index,layer_kind,n_w,attention,pruning_ratio,mask_zeros");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,conv2d,144,"));
    assert!(lines[4].starts_with("3,dense,640,"));

    assert_eq!(read(&f.path("run/iterations.csv")).lines().count(), 7);
    let last = stdout(&o);
    assert!(last.starts_with("accuracy=") && last.contains(" pruned_ratio="), "{last}");
}

#[test]
fn reruns_are_byte_identical() {
    let f = Fixture::new();
    assert!(f.train("a", &["--epochs", "2"]).status.success());
    assert!(f.train("b", &["--epochs", "2"]).status.success());
    assert_eq!(read(&f.path("a/metrics.csv")), read(&f.path("b/metrics.csv")));
    assert_eq!(
        std::fs::read(f.path("a/checkpoint.bin")).unwrap(),
        std::fs::read(f.path("b/checkpoint.bin")).unwrap()
    );
}

#[test]
fn invalid_flags_exit_2() {
    let f = Fixture::new();
    for bad in [
        &["--alpha", "0"][..],
        &["--gamma", "-1"],
        &["--batch-size", "0"],
        &["--arch", "no-such-arch"],
        &["--dataset", "imagenet"],
        &["--bogus"],
    ] {
        let o = f.train("x", bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
    assert!(!f.path("x").exists());
}

#[test]
fn missing_dataset_exits_2() {
    let f = Fixture::new();
    let empty = f.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = f.train("x", &["--data-dir", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));
}

#[test]
fn divergence_exits_3() {
    let f = Fixture::new();
    let o = f.train("x", &["--epochs", "1", "--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sparse_export_evaluates_like_its_checkpoint() {
    let f = Fixture::new();
    assert!(f.train("run", &["--epochs", "1"]).status.success());
    let ckpt = f.path("run/checkpoint.bin");
    let sparse = f.path("run/model.aswl");
    let o = f.run(&["export", "--checkpoint", ckpt.to_str().unwrap(), "--out", sparse.to_str().unwrap()]);
    assert!(o.status.success());
    let summary = stdout(&o);
    let sparse_bytes: u64 = summary
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("sparse_bytes="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(std::fs::metadata(&sparse).unwrap().len(), sparse_bytes);

    for split in ["test", "val", "train"] {
        let a = f.run(&["eval", "--model", ckpt.to_str().unwrap(), "--split", split, "--val-size", "8"]);
        let b = f.run(&["eval", "--model", sparse.to_str().unwrap(), "--split", split, "--val-size", "8"]);
        assert!(a.status.success() && b.status.success());
        assert_eq!(stdout(&a), stdout(&b));
        let line = stdout(&a);
        let line = line.trim();
        let (acc, ratio) = line.split_once(' ').unwrap();
        assert_eq!(acc.strip_prefix("accuracy=").unwrap().split('.').nth(1).unwrap().len(), 6, "{line}");
        assert_eq!(ratio.strip_prefix("pruned_ratio=").unwrap().split('.').nth(1).unwrap().len(), 6);
    }
}

#[test]
fn eval_of_missing_file_exits_2() {
    let f = Fixture::new();
    let o = f.run(&["eval", "--model", f.path("nope.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = f.run(&["report", "--checkpoint", f.path("nope.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_fresh_model() {
    let f = Fixture::new();
    assert!(f.train("fresh", &["--epochs", "0"]).status.success());
    assert_eq!(read(&f.path("fresh/metrics.csv")).lines().count(), 1);
    let o = f.run(&["report", "--checkpoint", f.path("fresh/checkpoint.bin").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).take(4).map(|l| l.split(',').collect()).collect();
    for row in &rows {
        assert_eq!(row[3], "0.500000");
        assert_eq!(row[4], "0.500000");
        assert_eq!(row[5], "0");
    }
    assert!(text.contains("global_pruned_ratio=0.000000"));
}

#[test]
fn report_columns_sum_to_global_ratio() {
    let f = Fixture::new();
    assert!(f.train("run", &["--epochs", "1", "--gamma", "2"]).status.success());
    let out = f.path("rep");
    let o = f.run(&[
        "report",
        "--checkpoint",
        f.path("run/checkpoint.bin").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let layers = read(&out.join("layers.csv"));
    let (zeros, total) = layers.lines().skip(1).fold((0u64, 0u64), |(z, t), l| {
        let c: Vec<&str> = l.split(',').collect();
        (z + c[5].parse::<u64>().unwrap(), t + c[2].parse::<u64>().unwrap())
    });
    let printed: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("global_pruned_ratio="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(zeros > 0);
    assert_eq!(format!("{:.6}", zeros as f64 / total as f64), format!("{printed:.6}"));
}
