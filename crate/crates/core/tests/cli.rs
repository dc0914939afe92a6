//! Drives the `nerv` binary end to end and checks its exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn nerv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerv"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("NERV_OUTPUT_ROOT")
        .output()
        .expect("spawn nerv")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(code(&nerv(&[], d)), 2);
    assert_eq!(code(&nerv(&["analyze", "--variant", "Q"], d)), 4);
    assert_eq!(code(&nerv(&["ingest-check", "missing"], d)), 3);

    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&nerv(&["ingest-check", "empty"], d)), 3);

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&nerv(&["quantize", "junk.ckpt", "--bits", "4", "--out", "q.ckpt"], d)), 6);

    assert_eq!(code(&nerv(&["synth", "--out", "frames", "--count", "2"], d)), 0);
    std::fs::write(d.join("bad.toml"), "stepz = 3\n").unwrap();
    assert_eq!(code(&nerv(&["train", "--frames", "frames", "--config", "bad.toml"], d)), 4);
    assert_eq!(code(&nerv(&["distill", "--frames", "frames", "--steps", "1"], d)), 2);
    assert_eq!(code(&nerv(&["qat", "--frames", "frames", "--bits", "4"], d)), 2);

    std::fs::create_dir(d.join("unreadable")).unwrap();
    std::fs::write(d.join("unreadable/frame_0.png"), b"not a png").unwrap();
    let o = nerv(&["ingest-check", "unreadable"], d);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("frame_0.png"));
    assert_eq!(code(&nerv(&["benchmark", "--warmup", "0", "--variants", "T-desk"], d)), 2);
}

#[test]
fn train_quantize_evaluate_decode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = nerv(args, d);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };

    ok(&["synth", "--out", "frames", "--count", "3", "--format", "ppm"]);
    assert!(ok(&["ingest-check", "frames"]).contains("180x320"));
    ok(&["train", "--frames", "frames", "--steps", "3", "--output", "runs/base"]);
    let run = d.join("runs/base");
    for f in ["final.ckpt", "run.toml", "loss.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let losses = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(losses.starts_with("step,epoch,lr,total,recon,kd"));
    assert_eq!(losses.lines().count(), 4);

    ok(&["quantize", "runs/base/final.ckpt", "--bits", "4", "--out", "runs/base/q4.ckpt"]);
    let fp = std::fs::metadata(run.join("final.ckpt")).unwrap().len();
    let q4 = std::fs::metadata(run.join("q4.ckpt")).unwrap().len();
    assert!(q4 * 5 < fp, "{q4} vs {fp}");

    ok(&["evaluate", "runs/base/q4.ckpt", "--frames", "frames", "--csv", "eval.csv"]);
    let eval = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 3 + 1);
    assert!(eval.lines().last().unwrap().starts_with("mean,"));

    ok(&["decode", "runs/base/q4.ckpt", "--out", "decoded", "--count", "2"]);
    assert_eq!(std::fs::read_dir(d.join("decoded")).unwrap().count(), 2);

    let root = tempfile::tempdir().unwrap();
    ok(&[
        "--output-root",
        root.path().to_str().unwrap(),
        "qat",
        "--frames",
        "frames",
        "--base",
        "runs/base/final.ckpt",
        "--bits",
        "4",
        "--steps",
        "2",
        "--output",
        "qat",
    ]);
    assert!(root.path().join("qat/final.ckpt").is_file());
    assert!(root.path().join("qat/qat_fp32.ckpt").is_file());
}
