#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noisy-lstm"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("NOISY_LSTM_THREADS").output().expect("spawn noisy-lstm")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs and asserts exit 0, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?} failed\nstdout:\n{}\nstderr:\n{}", stdout(&out), stderr(&out));
    stdout(&out)
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_json(path: &Path, value: serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    path.to_path_buf()
}

/// 24x24 clips of 12 frames with small shapes.
pub fn tiny_gen_config(dir: &Path, train: usize, val: usize) -> PathBuf {
    write_json(
        &dir.join("gen.json"),
        serde_json::json!({
            "height": 24, "width": 24, "size_min": 3.0, "size_max": 5.0,
            "clip_len": 12, "train_clips": train, "val_clips": val, "noise_pool": 4
        }),
    )
}

/// A small network and a few short epochs.
pub fn tiny_train_config(dir: &Path) -> PathBuf {
    write_json(
        &dir.join("train.json"),
        serde_json::json!({
            "phase1_epochs": 2, "phase2_epochs": 2, "batches_per_epoch": 2, "base_lr": 1e-3,
            "model": { "channels": [3, 4, 8, 8, 8], "bins": [1, 2, 3], "crop": [24, 24], "classes": 4, "forget_bias": 1.0 }
        }),
    )
}

/// Generates a tiny dataset under `dir/data`.
pub fn tiny_data(dir: &Path, train: usize, val: usize) -> PathBuf {
    let cfg = tiny_gen_config(dir, train, val);
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--config", s(&cfg)]);
    data
}

/// Every regular file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn count_dirs(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count()
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
