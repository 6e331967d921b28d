#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn tiny_config() -> Value {
    json!({
        "version": 1,
        "paths": {
            "dataset": "data",
            "dictionary": "dict",
            "checkpoint": "ckpt_lambda",
            "reconstruction": "recon",
            "evaluation": "eval"
        },
        "simulate": {
            "size": [16, 16], "train": 4, "val": 2, "test": 3, "ellipses": 3,
            "sigmas": [0.075, 0.15], "keep_fraction": 0.25, "seed": 11
        },
        "pretrain": {
            "images": 4,
            "highpass": {"beta": 1.0},
            "cdl": {"filters": 2, "kernel_size": 3, "outer_iters": 2, "csc_fista_iters": 10, "dict_step_iters": 3, "seed": 5}
        },
        "train": {
            "source": "constant",
            "config": {"epochs": 2, "seed": 7, "t_unroll": 6}
        },
        "reconstruct": {"split": "test", "samples": [0, 2], "png": true},
        "evaluate": {"split": "test", "methods": {"cdl_lambda": "ckpt_lambda/best"}}
    })
}

pub fn network_section() -> Value {
    json!({
        "source": "network",
        "init_from": "ckpt_lambda/best",
        "config": {"epochs": 2, "seed": 3, "t_unroll": 6, "lr_net": 1e-3}
    })
}

pub fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

pub fn convsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convsynth")).args(args).env("CONVSYNTH_THREADS", "1").output().unwrap()
}

/// Runs a command and panics with its stderr on failure.
pub fn ok(args: &[&str]) -> String {
    let out = convsynth(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Relative path to contents of every file below `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Names of files that differ or exist on one side only.
pub fn tree_diff(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (ta, tb) = (tree(a), tree(b));
    let mut bad: Vec<PathBuf> = ta.iter().filter(|(k, v)| tb.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect();
    bad.extend(tb.keys().filter(|k| !ta.contains_key(*k)).cloned());
    bad
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
