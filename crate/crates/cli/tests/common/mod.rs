//! Helpers for driving the `latent-dialog` binary from tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_latent-dialog");

pub fn toy_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

pub fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// A small config over the shipped toy corpus, with `extra` appended
/// verbatim (so it can add keys to the last table or open new ones).
pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let data = toy_data_dir();
    let text = format!(
        "seed = 3\n\n[data]\ntrain = {:?}\nvalid = {:?}\ntest = {:?}\nmax_vocab = 200\n\n{body}",
        data.join("train.txt"),
        data.join("valid.txt"),
        data.join("test.txt"),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub const FAST_MODELS: &str = "\
[vae]
embed_dim = 16
hidden = 24
latent = 8
epochs = 2
max_len = 12

[gan]
latent = 8
hidden = 16
gamma = 1.0
epochs = 2

[generate]
n_samples = 3
max_len = 12
";

pub fn run(args: &[&str]) -> Output {
    run_with_env(args, &[])
}

pub fn run_with_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs one subcommand with `--config` and `--out`, panicking with its
/// stderr on failure.
pub fn step(cmd: &str, config: &Path, out: &Path) -> Output {
    let o = run(&[
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{cmd} failed:\n{}", stderr(&o));
    o
}

pub fn pipeline(config: &Path, out: &Path) {
    for cmd in ["prepare", "train-vae", "train-gan", "generate", "evaluate"] {
        step(cmd, config, out);
    }
}
