mod common;

use std::fs;
use std::process::Command;

fn headfield() -> Command {
    Command::new(env!("CARGO_BIN_EXE_headfield"))
}

fn with_tiny(cmd: &mut Command) -> &mut Command {
    for s in common::TINY {
        cmd.arg("--set").arg(s);
    }
    cmd
}

#[test]
fn usage_errors_exit_with_2() {
    let st = headfield().arg("no-such-command").status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = headfield().args(["export"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn bad_override_exits_with_2() {
    let out = tempfile::tempdir().unwrap();
    let st = headfield()
        .args(["synth-data", "--set", "data.bogus=3", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_2() {
    let out = tempfile::tempdir().unwrap();
    let st = headfield()
        .args(["export", "--checkpoint", "/nonexistent/stage1.hfck", "--out"])
        .arg(out.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn synth_data_then_stage2_without_stage1() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let st = with_tiny(headfield().args(["--seed", "3", "synth-data", "--out"]).arg(&data))
        .status()
        .unwrap();
    assert!(st.success());
    let manifest = fs::read(data.join("manifest.json")).unwrap();

    let st = with_tiny(headfield().args(["--seed", "3", "synth-data", "--out"]).arg(&data))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), manifest);

    let st = with_tiny(headfield().args(["train", "--stage", "2", "--quiet", "--data"]).arg(&data))
        .arg("--out")
        .arg(root.path().join("run"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}
