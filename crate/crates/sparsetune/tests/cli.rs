//! The binary's contract: flags parse, reports land where asked, errors
//! exit nonzero with a message.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sparsetune");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary spawns")
}

fn write_toy_preset(dir: &Path) -> String {
    let path = dir.join("toy.preset");
    std::fs::write(&path, "d_model = 64\nd_head = 32\nd_ffn = 128\nactivation = relu\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn profile_prints_a_parsable_report() {
    let dir = tempfile::tempdir().unwrap();
    let preset = write_toy_preset(dir.path());
    let out = run(&[
        "profile", "--name", &preset, "--tuning", "sparse", "--module", "block", "--d_lora", "4",
        "--seq_length", "16", "--batch_size", "2", "--backward", "--causal", "--lambda", "0.125",
        "--beta", "0.5", "--seed", "7",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    assert_eq!(report["seed"], 7);
    assert_eq!(report["backward"], true);
    assert!(report["flops"].as_u64().unwrap() > 0);
}

#[test]
fn profile_out_flag_writes_the_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let preset = write_toy_preset(dir.path());
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "profile", "--name", &preset, "--seq_length", "8", "--batch_size", "1", "--d_lora", "4",
        "--out", report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty(), "report went to the file, not stdout");
    let text = std::fs::read_to_string(&report_path).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["seq_length"], 8);
}

#[test]
fn profile_name_list_prints_the_presets() {
    let out = run(&["profile", "--name", "list"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in sparsetune::PRESET_NAMES {
        assert!(stdout.lines().any(|l| l == name), "missing preset {name}");
    }
}

#[test]
fn unknown_preset_and_bad_tuning_exit_nonzero() {
    let out = run(&["profile", "--name", "opt-9999"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("opt-9999"));

    let out = run(&["profile", "--tuning", "sparser"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparser"));
}

#[test]
fn train_runs_a_few_tiny_steps() {
    let out = run(&[
        "train", "--tuning", "sparse", "--steps", "3", "--batch_size", "2", "--seq_length", "16",
        "--lr", "1e-3", "--d_lora", "4", "--seed", "1", "--log_every", "0",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("loss"), "summary line reports the loss: {stdout}");
}
