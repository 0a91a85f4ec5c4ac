#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_sgxp");

/// Small networks and one or two epochs: enough to exercise every command.
pub const TINY: &str = r#"{
  "model": {
    "input_size": 32,
    "unet": {"input_size": 32, "depth": 2, "base_channels": 4},
    "classifier": {"input_size": 32, "head": [16], "dropout_rate": 0.2, "bn_momentum": 0.9}
  },
  "schedule": {
    "segmentation": {"epochs": 2},
    "classifier": {"warmup_epochs": 1, "finetune_epochs": 1, "batch_size": 8}
  }
}"#;

pub fn sgxp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn sgxp")
}

pub fn code(args: &[&str]) -> i32 {
    let out = sgxp(args);
    out.status.code().expect("exit code")
}

/// Runs and insists on exit 0.
pub fn ok(args: &[&str]) {
    let out = sgxp(args);
    assert!(
        out.status.success(),
        "sgxp {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn report(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report.json");
    serde_json::from_str(&text).expect("report parses")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A synthesized and split corpus under `root`, built with `config`.
pub struct Fixture {
    pub root: PathBuf,
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub manifest: PathBuf,
}

impl Fixture {
    pub fn new(root: &Path, config: &str, synth: &[&str]) -> Fixture {
        let cfg = root.join("config.json");
        std::fs::write(&cfg, config).unwrap();
        let corpus = root.join("corpus");
        let split = root.join("split");
        let mut args = vec!["synth", "--out", s(&corpus), "--config", s(&cfg)];
        args.extend_from_slice(synth);
        ok(&args);
        let mut args = vec!["split", "--manifest"];
        let m = corpus.join("manifest.csv");
        args.extend([s(&m), "--out", s(&split), "--config", s(&cfg)]);
        for flag in ["--seed", "--mode"] {
            if let Some(i) = synth.iter().position(|a| *a == flag) {
                args.extend([flag, synth[i + 1]]);
            }
        }
        ok(&args);
        Fixture {
            root: root.to_path_buf(),
            config: cfg,
            corpus,
            manifest: split.join("manifest.csv"),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
