use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvcomp::data::load_split;
use hvcomp::train::{load_checkpoint, save_checkpoint, strip_posterior};

fn hvcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvcomp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MANIFEST: &str = "seed=3\nfamilies=sphere:0.5,box:0.5\ntrain=4\nval=1\ntest=2\n";

const MICRO: &str = "\
variant=hierarchical
resolution=8
channels=8
rank=2
levels=3
latent_dim=4
global_dim=8
global_latent_dim=4
encoder_hidden=8
layer_hidden=8
head_hidden=8
decoder_hidden=8
pooling=mean
activation=softplus
batch=1
queries=32
lr=0.01
warmup=4
grid=16
samples=3
iou_samples=2000
completion_points=256
";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("manifest.txt"), MANIFEST).unwrap();
        fs::write(root.join("micro.txt"), MICRO).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn make_data(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        let r = hvcomp(&["make-data", "--manifest", p(&self.path("manifest.txt")), "--out", p(&out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> Output {
        let config = self.path("micro.txt");
        let mut args = vec!["train", "--config", p(&config), "--data", p(data)];
        let out = self.path(out);
        args.extend(["--out", p(&out)]);
        args.extend_from_slice(extra);
        let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        hvcomp(&refs)
    }

    /// A trained micro checkpoint and the dataset it was trained on.
    fn trained(&self) -> (PathBuf, PathBuf) {
        let data = self.make_data("data");
        let r = self.train(&data, "run", &["--set", "iterations=1000"]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        (self.path("run").join("checkpoint.hvcp"), data)
    }

    fn write_partial(&self, data: &Path) -> PathBuf {
        let item = &load_split(data, "test").unwrap()[0];
        let path = self.path("partial.xyz");
        item.partial.write_xyz(&path).unwrap();
        let complete = self.path("complete.xyz");
        item.complete.write_xyz(&complete).unwrap();
        path
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                out.push((e.strip_prefix(dir).unwrap().display().to_string(), fs::read(&e).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_exit_codes() {
    let r = hvcomp(&["--help"]);
    let text = String::from_utf8_lossy(&r.stdout);
    for needle in ["Exit codes", "non-finite loss", "no posterior", "gradient check failed", "HVCP_THREADS"] {
        assert!(text.contains(needle), "missing `{needle}` in help");
    }
}

#[test]
fn make_data_is_deterministic() {
    let f = Fixture::new();
    let a = f.make_data("a");
    let b = f.make_data("b");
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(load_split(&a, "train").unwrap().len(), 4);
}

#[test]
fn bad_manifest_exits_2() {
    let f = Fixture::new();
    fs::write(f.path("bad.txt"), "seed=1\nfamilies=sphere:0.5,box:0.4\ntrain=1\nval=1\ntest=1\n").unwrap();
    let r = hvcomp(&["make-data", "--manifest", p(&f.path("bad.txt")), "--out", p(&f.path("x"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("sum to 1"));
    let r = hvcomp(&["make-data", "--manifest", p(&f.path("missing.txt")), "--out", p(&f.path("x"))]);
    assert_eq!(code(&r), 3);
}

#[test]
fn train_writes_one_log_row_per_step() {
    let f = Fixture::new();
    let data = f.make_data("data");
    let r = f.train(&data, "run", &["--set", "iterations=100"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let log = fs::read_to_string(f.path("run").join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 101);
    assert!(f.path("run").join("checkpoint.hvcp").exists());
    let r = f.train(&data, "bad", &["--set", "no_such_key=1"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.make_data("data");
    assert_eq!(code(&f.train(&data, "full", &["--set", "iterations=60"])), 0);
    assert_eq!(code(&f.train(&data, "split", &["--set", "iterations=25"])), 0);
    let r = f.train(&data, "split", &["--set", "iterations=60", "--resume"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let full = fs::read_to_string(f.path("full").join("train_log.csv")).unwrap();
    let split = fs::read_to_string(f.path("split").join("train_log.csv")).unwrap();
    assert_eq!(full, split);
    let (a, _) = load_checkpoint(&f.path("full").join("checkpoint.hvcp")).unwrap();
    let (b, _) = load_checkpoint(&f.path("split").join("checkpoint.hvcp")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_variant_trains() {
    let f = Fixture::new();
    let data = f.make_data("data");
    for v in ["global", "global-factors", "local", "hierarchical"] {
        let r = f.train(&data, v, &["--set", "iterations=5", "--set", &format!("variant={v}")]);
        assert_eq!(code(&r), 0, "{v}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn complete_reconstruct_and_eval() {
    let f = Fixture::new();
    let (ckpt, data) = f.trained();
    let partial = f.write_partial(&data);
    let complete = |seed: &str, out: &str| {
        hvcomp(&[
            "complete", "--checkpoint", p(&ckpt), "--input", p(&partial), "--samples", "10", "--seed", seed,
            "--out-dir", p(&f.path(out)),
        ])
    };
    let r = complete("0", "c0");
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let meshes: Vec<_> = dir_bytes(&f.path("c0")).into_iter().filter(|(n, _)| n.ends_with(".obj")).collect();
    assert_eq!(meshes.len(), 10);
    let uhd = fs::read_to_string(f.path("c0").join("uhd.csv")).unwrap();
    assert_eq!(uhd.lines().count(), 11);
    assert_eq!(code(&complete("0", "c0b")), 0);
    assert_eq!(dir_bytes(&f.path("c0")), dir_bytes(&f.path("c0b")));
    assert_eq!(code(&complete("100", "c1")), 0);
    assert_ne!(fs::read(f.path("c0/sample_00.obj")).unwrap(), fs::read(f.path("c1/sample_00.obj")).unwrap());

    let rec = |out: &str, ck: &Path| {
        hvcomp(&["reconstruct", "--checkpoint", p(ck), "--input", p(&f.path("complete.xyz")), "--out", p(&f.path(out))])
    };
    assert_eq!(code(&rec("r1.obj", &ckpt)), 0);
    assert_eq!(code(&rec("r2.obj", &ckpt)), 0);
    assert_eq!(fs::read(f.path("r1.obj")).unwrap(), fs::read(f.path("r2.obj")).unwrap());

    let (mut store, cfg) = load_checkpoint(&ckpt).unwrap();
    strip_posterior(&mut store);
    let stripped = f.path("prior_only.hvcp");
    save_checkpoint(&store, &cfg, cfg.checkpoint_iter, &stripped).unwrap();
    let r = rec("r3.obj", &stripped);
    assert_eq!(code(&r), 6);
    assert!(String::from_utf8_lossy(&r.stderr).contains("posterior"));

    let eval = |out: &str| {
        hvcomp(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--seed", "1", "--out", p(&f.path(out))])
    };
    assert_eq!(code(&eval("a.csv")), 0);
    assert_eq!(code(&eval("b.csv")), 0);
    let a = fs::read_to_string(f.path("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(f.path("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 2 + 1);
    for line in a.lines().skip(1) {
        let tmd: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(tmd.is_nan() || tmd >= 0.0, "{line}");
    }
    let r = hvcomp(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data.join("test")), "--mode", "octant", "--out",
        p(&f.path("octant.csv")),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let r = hvcomp(&["gradcheck", "--scale", "micro"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    assert!(String::from_utf8_lossy(&r.stdout).contains("elbo"));
    let r = hvcomp(&["gradcheck", "--scale", "micro", "--inject-fault"]);
    assert_eq!(code(&r), 7);
    assert!(String::from_utf8_lossy(&r.stderr).contains("gradient check failed"));
}
