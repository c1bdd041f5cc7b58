use std::path::Path;
use std::process::{Command, Output};

fn rotorwatch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotorwatch"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ROTORWATCH_OUT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotorwatch(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotorwatch(&["features", "--input", "absent.csv", "--channels", "3"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("rotorwatch: error:"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "setting = 1\nno_such_key = 3\n").unwrap();
    let o = rotorwatch(&["eval", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn synth_writes_dataset_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let o = rotorwatch(&["synth", "--batches", "30", "--seed", "3", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["data.csv", "labels.csv", "truth.json"] {
        assert!(dir.path().join("s").join(f).is_file(), "{f}");
    }
    let labels = std::fs::read_to_string(dir.path().join("s/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 31);
}

#[test]
fn channel_mismatch_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(
        cwd.join("spec.toml"),
        "seed = 1\nquantile = 0.9\n[synth]\nn_batches = 120\ntimesteps = 16\n[train]\nepochs = 2\nhidden_sizes = [4, 2]\n",
    )
    .unwrap();
    assert!(rotorwatch(&["synth", "--batches", "120", "--out", "s"], cwd).status.success());
    let o = rotorwatch(
        &["train", "--config", "spec.toml", "--input", "s/data.csv", "--labels", "s/labels.csv", "--channels", "3", "--out", "m"],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = rotorwatch(&["score", "--model", "m/model.json", "--input", "s/data.csv", "--channels", "2"], cwd);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("channels"));
}
