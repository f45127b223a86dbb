#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evographnet"));
    cmd.env("RUST_LOG", "warn").env_remove("EVOGRAPHNET_OUT");
    cmd
}

/// Runs the binary and returns its output; panics with stderr when the exit
/// code differs from `expect`.
pub fn run(args: &[&str], expect: i32) -> Output {
    let out = bin().args(args).output().expect("spawn evographnet");
    assert_eq!(
        out.status.code(),
        Some(expect),
        "evographnet {}\nstdout:\n{}\nstderr:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → file contents for every file under `dir`.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

pub fn gen_data(out: &Path, subjects: usize, rois: usize, seed: u64) {
    run(
        &[
            "gen-data",
            "--subjects",
            &subjects.to_string(),
            "--rois",
            &rois.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            s(out),
        ],
        0,
    );
}
