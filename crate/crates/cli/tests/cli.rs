use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn counts(csv: &str) -> Vec<u64> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn identity_histogram() {
    let dir = tempfile::tempdir().unwrap();
    assert!(spc(dir.path(), &["codes", "generate", "--family", "ii", "--pixels", "4", "--out", "i.csv"]).status.success());
    let o = spc(dir.path(), &["mask-histogram", "i.csv", "--bins", "0,1"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(counts(&stdout(&o)), vec![12, 4]);
}

#[test]
fn hadamard_histogram() {
    // Sylvester H4 has six -1 entries
    let dir = tempfile::tempdir().unwrap();
    assert!(spc(dir.path(), &["codes", "generate", "--family", "hb", "--pixels", "4", "--out", "h.spcm"]).status.success());
    let o = spc(dir.path(), &["mask-histogram", "h.spcm", "--bins", "-1,1", "--out", "h.csv"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(counts(&fs::read_to_string(dir.path().join("h.csv")).unwrap()), vec![6, 10]);
}

#[test]
fn empty_bins_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    spc(dir.path(), &["codes", "generate", "--family", "ii", "--pixels", "4", "--out", "i.csv"]);
    let o = spc(dir.path(), &["mask-histogram", "i.csv", "--bins", "-5,0,1,7"]);
    assert_eq!(counts(&stdout(&o)), vec![0, 12, 4, 0]);
    let o = spc(dir.path(), &["mask-histogram", "i.csv", "--uniform", "4"]);
    assert_eq!(counts(&stdout(&o)), vec![12, 0, 0, 4]);
}

#[test]
fn theory_table_has_four_cells() {
    let dir = tempfile::tempdir().unwrap();
    let o = spc(dir.path(), &["theory", "--pixels", "64", "--sigma", "1", "--photons", "1e4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2 + 4);
    assert!(text.contains("1.677722e-1"), "{text}");
    assert!(text.contains("2.097152e-2"), "{text}");
}

const RECON: &str = r#"
id = "r"
task = "reconstruct"
trials = 200
families = ["rs", "hb"]
budgets = [1e2, 1e4]
dataset = { kind = "ramp", pixels = 8 }
"#;

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.toml"), RECON).unwrap();
    let o = spc(dir.path(), &["--out-dir", "out", "--threads", "2", "simulate", "reconstruct", "r.toml"]);
    assert!(o.status.success(), "{o:?}");
    assert!(dir.path().join("out/r.summary.json").exists());
    let o = spc(dir.path(), &["report", "out/r.csv", "--cells", "cells.csv"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("HB/RS mse ratio")).count(), 2);
    assert_eq!(fs::read_to_string(dir.path().join("cells.csv")).unwrap().lines().count(), 2 + 4);
}

#[test]
fn seed_flag_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.toml"), RECON).unwrap();
    let read = |d: &str| fs::read(dir.path().join(d).join("r.csv")).unwrap();
    spc(dir.path(), &["--seed", "5", "--out-dir", "a", "simulate", "reconstruct", "r.toml"]);
    spc(dir.path(), &["--seed", "5", "--out-dir", "b", "simulate", "reconstruct", "r.toml"]);
    spc(dir.path(), &["--seed", "6", "--out-dir", "c", "simulate", "reconstruct", "r.toml"]);
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), RECON.replace("[1e2, 1e4]", "[]")).unwrap();
    let o = spc(dir.path(), &["simulate", "reconstruct", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`budgets`"));

    fs::write(dir.path().join("r.toml"), RECON).unwrap();
    assert_eq!(spc(dir.path(), &["simulate", "classify", "r.toml"]).status.code(), Some(2));
    assert_eq!(spc(dir.path(), &["simulate", "reconstruct", "missing.toml"]).status.code(), Some(1));
    assert_eq!(spc(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(spc(dir.path(), &["mask-histogram", "nope.csv", "--bins", "0"]).status.code(), Some(1));

    fs::write(dir.path().join("r.csv"), "experiment,family,noise,photons,trial,metric,value\nr,RS,poisson,1,0,psnr,1\n").unwrap();
    let o = spc(dir.path(), &["report", "r.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("r.csv:2"));
}
