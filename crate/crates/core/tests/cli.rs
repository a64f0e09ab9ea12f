use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tdlp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdlp"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn gen_data_then_eval_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("w.toml"), "[world]\nn_objects = 3\nn_frames = 30\n").unwrap();
    let out = tdlp(&["gen-data", "--out", "data", "--sequences", "2", "--seed", "7", "--config", "w.toml"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("data/gt/synth-7.txt").is_file() && d.join("data/det/synth-8.txt").is_file());
    let manifest = fs::read_to_string(d.join("data/manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[worlds]]").count(), 2);
    assert!(manifest.contains("seed = 8"));

    let out = tdlp(&["eval", "--gt", "data/gt", "--pred", "data/gt", "--metrics", "hota,idf1", "--out", "r.csv"], d);
    assert!(out.status.success());
    let csv = fs::read_to_string(d.join("r.csv")).unwrap();
    let combined = csv.lines().find(|l| l.starts_with("COMBINED")).unwrap();
    let cols: Vec<&str> = combined.split(',').collect();
    assert_eq!((cols[1], cols[5]), ("1.000000", "1.000000"));
    // MOTA was not requested.
    assert_eq!(cols[4], "");
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = tdlp(&["track", "--ckpt", "missing.ckpt", "--dets", "x.txt", "--out", "o.txt"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    fs::write(d.join("bad.toml"), "[nonsense]\nx = 1\n").unwrap();
    let out = tdlp(&["gen-data", "--out", "data", "--config", "bad.toml"], d);
    assert!(!out.status.success());

    fs::write(d.join("rate.toml"), "[world]\ndropout = 3.0\n").unwrap();
    let out = tdlp(&["gen-data", "--out", "data", "--config", "rate.toml"], d);
    assert!(!out.status.success());

    let out = tdlp(&["eval", "--gt", "nowhere", "--pred", "nowhere", "--out", "r.csv"], d);
    assert!(!out.status.success());
    let out = tdlp(&["eval", "--gt", ".", "--pred", ".", "--metrics", "hota,bogus", "--out", "r.csv"], d);
    assert!(!out.status.success());
    let out = tdlp(&["frobnicate"], d);
    assert!(!out.status.success());
}

#[test]
fn synth_rejects_unknown_suite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = tdlp::model::Model::init(
        tdlp::model::ModelConfig::tiny(vec![tdlp::features::ModalitySpec::bbox()]),
        0,
    )
    .unwrap();
    tdlp::model::save_checkpoint(&model, d.join("m.ckpt")).unwrap();
    let out = tdlp(&["synth", "--suite", "other", "--ckpt", "m.ckpt", "--out", "r.txt"], d);
    assert!(!out.status.success());
    let out = tdlp(&["synth", "--suite", "appendix-b", "--ckpt", "m.ckpt", "--out", "r.txt"], d);
    assert!(out.status.success());
    let report = fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(report.contains("TDLP rank test") && report.contains("TDLP threshold test"));
}
