#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn tfbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfbs-moe"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs and asserts exit 0, printing stderr otherwise.
pub fn ok(args: &[&str]) -> Output {
    let out = tfbs(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", stderr(&out));
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Small two-motif pipeline: corpora, two experts, a mixture.
pub struct Pipeline {
    pub dir: tempfile::TempDir,
}

impl Pipeline {
    pub fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    pub fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        for (prefix, motif, seed) in [("a_", "GATAAG", "1"), ("b_", "CCGTCA", "2")] {
            ok(&[
                "gen-data",
                "--motif",
                motif,
                "--n",
                "240",
                "--len",
                "30",
                "--seed",
                seed,
                "--out-dir",
                p(d),
                "--prefix",
                prefix,
            ]);
        }
        for (prefix, seed) in [("a_", "3"), ("b_", "4")] {
            ok(&[
                "train-expert",
                "--train",
                p(&d.join(format!("{prefix}train.tsv"))),
                "--val",
                p(&d.join(format!("{prefix}val.tsv"))),
                "--out",
                p(&d.join(format!("{prefix}expert.json"))),
                "--num-filters",
                "4",
                "--motif-width",
                "6",
                "--embed-dim",
                "6",
                "--hidden-dim",
                "6",
                "--max-epochs",
                "6",
                "--seed",
                seed,
            ]);
        }
        ok(&[
            "train-moe",
            "--experts",
            p(&d.join("a_expert.stripped.json")),
            p(&d.join("b_expert.stripped.json")),
            "--train",
            p(&d.join("a_train.tsv")),
            "--val",
            p(&d.join("a_val.tsv")),
            "--out",
            p(&d.join("moe.json")),
            "--max-epochs",
            "5",
            "--seed",
            "5",
        ]);
        Pipeline { dir }
    }
}
