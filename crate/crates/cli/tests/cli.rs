use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ftlab::mininet::Checkpoint;
use ftlab::synth::read_dataset;

fn ftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftlab")).args(args).output().expect("spawn ftlab")
}

fn ok(args: &[&str]) -> String {
    let out = ftlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ftlab(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Lab {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Lab {
    /// Tiny datasets plus a one-epoch pretrained checkpoint.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        fs::create_dir(&data).unwrap();
        ok(&["gen-data", "--out", s(&data), "--per-class", "4", "--test-per-class", "2", "--image-size", "16"]);
        let model = root.join("model.json");
        fs::write(&model, r#"{"input_size": 16, "base_channels": 2}"#).unwrap();
        ok(&[
            "pretrain",
            "--data",
            s(&data.join("source-train.ftdata")),
            "--epochs",
            "1",
            "--batch-size",
            "7",
            "--config",
            s(&model),
            "--out",
            s(&root.join("pre")),
        ]);
        Lab { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn finetune(&self, strategy: &str, out: &str) -> Checkpoint {
        ok(&[
            "finetune",
            "--source",
            s(&self.path("pre/model.ftckpt")),
            "--data",
            s(&self.path("data/target-train.ftdata")),
            "--test",
            s(&self.path("data/target-test.ftdata")),
            "--strategy",
            strategy,
            "--epochs",
            "2",
            "--batch-size",
            "7",
            "--out",
            s(&self.path(out)),
        ]);
        Checkpoint::read(&self.path(&format!("{out}/model.ftckpt"))).unwrap()
    }
}

#[test]
fn gen_data_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    let args = |out: &Path| {
        ok(&["gen-data", "--out", s(out), "--per-class", "20", "--test-per-class", "2", "--image-size", "16", "--seed", "4"])
    };
    args(&a);
    args(&b);
    assert_eq!(read_dataset(&a.join("source-train.ftdata")).unwrap().len(), 140);
    assert_eq!(read_dataset(&a.join("target-test.ftdata")).unwrap().len(), 14);
    for f in ["source-train.ftdata", "source-test.ftdata", "target-train.ftdata", "target-test.ftdata", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"][0]["samples"], 140);
}

#[test]
fn gen_data_missing_dir_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&["gen-data", "--out", s(&missing), "--per-class", "1", "--image-size", "16"]), 2);
    assert!(!missing.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_and_data_exit_codes() {
    let lab = Lab::new();
    let data = lab.path("data/target-train.ftdata");
    let pre = lab.path("pre/model.ftckpt");
    let x = lab.path("x");
    let base = ["finetune", "--source", s(&pre), "--data", s(&data), "--out", s(&x)];
    assert_eq!(code(&[&base[..], &["--strategy", "fc-only"]].concat()), 1);
    assert_eq!(code(&[&base[..], &["--strategy", "partial-bn=9"]].concat()), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);

    let bad = lab.path("bad.ftckpt");
    let mut bytes = fs::read(&pre).unwrap();
    bytes[3] ^= 0xff;
    fs::write(&bad, &bytes).unwrap();
    let out = ftlab(&["eval", "--checkpoint", s(&bad), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
    assert_eq!(code(&["experiment"]), 1);
}

#[test]
fn eval_prints_accuracy_last() {
    let lab = Lab::new();
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&lab.path("pre/model.ftckpt")),
        "--data",
        s(&lab.path("data/source-test.ftdata")),
    ]);
    let last = out.lines().last().unwrap();
    let acc: f32 = last.strip_prefix("accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn finetune_fc_and_partial_bn_freeze_contracts() {
    let lab = Lab::new();
    let source = Checkpoint::read(&lab.path("pre/model.ftckpt")).unwrap();
    let fc = lab.finetune("fc", "fc");
    for (name, t) in &source.tensors {
        assert_eq!(t.bit_eq(&fc.tensors[name]), !name.starts_with("head."), "{name}");
    }
    let partial = lab.finetune("partial-bn=3,4", "pbn");
    for (name, t) in &source.tensors {
        let trainable = name.starts_with("head.")
            || ((name.starts_with("s3.") || name.starts_with("s4.")) && name.contains(".bn."));
        assert_eq!(t.bit_eq(&partial.tensors[name]), !trainable, "{name}");
    }
    let history = fs::read_to_string(lab.path("pbn/history.csv")).unwrap();
    assert!(history.lines().nth(1).unwrap().starts_with("1,\"partial-bn=3,4\",adam,0,0.01,0.01,"), "{history}");
}

#[test]
fn diverge_modes_and_filters() {
    let lab = Lab::new();
    let pre = lab.path("pre/model.ftckpt");
    let report = lab.path("d.csv");
    let rows = |mode: &str, group: &str| {
        ok(&["diverge", s(&pre), s(&pre), "--mode", mode, "--group", group, "--out", s(&report)]);
        let text = fs::read_to_string(&report).unwrap();
        text.lines().skip(1).map(|l| l.split(',').map(String::from).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let std = rows("standard", "all");
    assert_eq!(std.len(), 13);
    assert!(std.iter().all(|r| r[4] == "0"));
    let paper = rows("paper", "all");
    assert!(paper.iter().all(|r| r[4] == "0.5" && r[3] == "paper"));
    let beta = rows("standard", "bn-bias");
    assert_eq!(beta.len(), 4);
    assert!(beta.iter().all(|r| r[0].ends_with("bn.beta") && r[2] == "bn-bias"));

    let json = lab.path("d.json");
    lab.finetune("bn-fc", "bnfc");
    ok(&["diverge", s(&lab.path("bnfc/model.ftckpt")), s(&pre), "--format", "json", "--out", s(&json)]);
    let profile = ftlab::divergence::read_divergence_json(&json).unwrap();
    assert_eq!(profile.rows.len(), 13);
    assert!(profile.rows.iter().any(|r| r.kl > 0.0));
}

#[test]
fn experiment_grid_rows_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(
        &cfg,
        r#"{
  "version": 1,
  "model": {"input_size": 16, "base_channels": 2},
  "source": {"image_size": 16},
  "source_per_class": 3,
  "target_per_class": 4,
  "test_per_class": 2,
  "splits": [2, 4],
  "strategies": ["fc", "diff-lr"],
  "seeds": [0, 1, 2],
  "epochs": 1,
  "batch_size": 7
}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let first = ok(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    assert!(first.contains("cells=12 computed=12 reused=0 failed=0"), "{first}");
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 13);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(out.join("seed-1/k4/diff-lr/divergence.csv").is_file());

    let second = ok(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    assert!(second.contains("computed=0 reused=12"), "{second}");
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), results);

    fs::write(&cfg, r#"{"version": 1, "strategies": ["fc"], "seeds": [0], "epoch": 3}"#).unwrap();
    assert_eq!(code(&["experiment", "--config", s(&cfg), "--out", s(&out)]), 1);
}
