use std::path::Path;
use std::process::{Command, Output};

fn revision(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revision")).args(args).output().expect("spawn revision")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(str::to_owned).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"seed": 3, "corpus": {"scenes": 6, "held_out": 4}}"#).unwrap();
    path
}

#[test]
fn help_exits_zero_and_usage_errors_exit_two() {
    assert_eq!(revision(&["--help"]).status.code(), Some(0));
    assert_eq!(revision(&[]).status.code(), Some(2));
    assert_eq!(revision(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(revision(&["eval"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = revision(&["run", "--out", s(&dir.path().join("r")), "--checkpoint", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error [PmpError]") && err.contains("missing.json"), "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let out = revision(&["gen-corpus", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_prints_a_small_error() {
    let out = revision(&["grad-check", "--layers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let err: f64 = stdout_lines(&out)[0].parse().unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn corpus_train_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = small_config(root);
    let corpus = root.join("corpus");

    let out = revision(&["gen-corpus", "--config", s(&config), "--out", s(&corpus), "--count", "4"]);
    assert!(out.status.success());
    assert_eq!(stdout_lines(&out), vec![s(&corpus.join("corpus.json")).to_owned()]);
    assert!(corpus.join("scene_0003.json").is_file() && corpus.join("motions_0003.json").is_file());

    let ckpt = root.join("prior.ckpt");
    let out = revision(&[
        "train-pmp", "--config", s(&config), "--corpus", s(&corpus), "--steps", "3", "--out", s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out).len(), 3);
    assert!(root.join("prior.csv").is_file() && root.join("prior.summary.json").is_file());

    let run_dir = root.join("run");
    let out = revision(&["run", "--config", s(&config), "--checkpoint", s(&ckpt), "--out", s(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("report.json").is_file());

    let denoised = root.join("denoised.json");
    let raw = run_dir.join("stage2/raw.json");
    let out = revision(&["denoise", "--checkpoint", s(&ckpt), "--input", s(&raw), "--tags", "walk", "--out", s(&denoised)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // A clip compared with itself is perfect.
    let fin = run_dir.join("final");
    let out = revision(&["eval", s(&fin), s(&fin)]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ssim"], 1.0);
    assert_eq!(v["mask_miou"], 1.0);

    let out = revision(&["eval", s(&raw), s(&raw)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["traj_mse"], 0.0);

    let out = revision(&["eval", s(&fin), s(&raw)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn extend_then_stitch_reproduces_the_long_clip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = small_config(root);
    let ckpt = root.join("prior.ckpt");
    assert!(revision(&["train-pmp", "--config", s(&config), "--steps", "2", "--out", s(&ckpt)]).status.success());
    let corpus = root.join("corpus");
    assert!(revision(&["gen-corpus", "--config", s(&config), "--out", s(&corpus), "--count", "1"]).status.success());

    let long = root.join("long");
    let out = revision(&[
        "extend", "--checkpoint", s(&ckpt), "--scene", s(&corpus.join("scene_0000.json")),
        "--motion", s(&corpus.join("motions_0000.json")), "--target", "56", "--generate", "--out", s(&long),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let restitched = root.join("restitched");
    let out = revision(&[
        "stitch", "--plan", s(&long.join("plan.json")),
        "--clips", s(&long.join("window_00")), s(&long.join("window_01")),
        "--out", s(&restitched),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["clip.json", "frame_0000.pgm", "frame_0055.pgm"] {
        assert_eq!(std::fs::read(long.join("stitched").join(f)).unwrap(), std::fs::read(restitched.join(f)).unwrap(), "{f}");
    }
}
