use std::path::Path;
use std::process::{Command, Output};

fn storm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storm")).args(args).current_dir(dir).output().unwrap()
}

#[test]
fn default_config_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = storm(dir.path(), &["default-config"]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("c.toml"), &out.stdout).unwrap();
    let c = storm::PipelineConfig::load(&dir.path().join("c.toml")).unwrap();
    assert_eq!(c, storm::PipelineConfig::default());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = storm(dir.path(), &["simulate", "--scene", "nowhere", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = storm(dir.path(), &["simulate", "--scene", "wall-brush", "--set", "ogm.no_such_key=1", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "not json\n").unwrap();
    let out = storm(dir.path(), &["run", "--data", "bad.jsonl", "--set", "ablation.disable_gridnet=true"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn run_without_grid_writes_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let sim = storm(dir.path(), &["simulate", "--scene", "circling", "--seconds", "2", "--out", "s.jsonl"]);
    assert!(sim.status.success());
    let run = storm(dir.path(), &["run", "--data", "s.jsonl", "--set", "ablation.disable_gridnet=true", "--out", "log.jsonl"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
}
