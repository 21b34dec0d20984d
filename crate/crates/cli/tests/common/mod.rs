#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small but well-trained network for the 16 kHz synthetic corpus.
pub const NETWORK: &[&str] = &[
    "--window-ms",
    "100",
    "--stages",
    "64:2:30:8,5:1:30:3,5:1:30:3",
    "--hidden",
    "64",
];

pub fn rawcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawcnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = rawcnn(args);
    assert!(
        out.status.success(),
        "rawcnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    rawcnn(args).status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Data rows of a CSV file, split on commas.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

pub fn synth(out: &Path, seed: u64, counts: (usize, usize, usize), extra: &[&str]) {
    let (tr, cv, te) = (counts.0.to_string(), counts.1.to_string(), counts.2.to_string());
    let seed = seed.to_string();
    let mut args = vec![
        "synth", "--out", p(out), "--seed", &seed, "--num-train", &tr, "--num-cv", &cv, "--num-test", &te,
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

pub fn train(corpus: &Path, out: &Path, seed: u64, extra: &[&str]) {
    let (tr, cv) = (corpus.join("train.jsonl"), corpus.join("cv.jsonl"));
    let seed = seed.to_string();
    let mut args = vec!["train", "--out", p(out), "--train", p(&tr), "--cv", p(&cv), "--seed", &seed];
    args.extend_from_slice(NETWORK);
    if !extra.contains(&"--lr") {
        args.extend_from_slice(&["--lr", "0.01"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
}

pub fn decode(model: &Path, manifest: &Path, out: &Path, decoder: &str) {
    ok(&["decode", "--out", p(out), "--model", p(model), "--test", p(manifest), "--decoder", decoder]);
}

/// Pooled accuracy from the TOTAL row of `eval.csv`.
pub fn eval_total(manifest: &Path, hyp: &Path, out: &Path) -> f64 {
    ok(&["eval", "--out", p(out), "--ref", p(manifest), "--hyp", p(hyp)]);
    let rows = csv_rows(&out.join("eval.csv"));
    let total = rows.last().expect("total row");
    assert_eq!(total[0], "TOTAL");
    total[6].parse().expect("pooled accuracy")
}
