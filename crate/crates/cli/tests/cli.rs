use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advgps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advgps")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"schema_version": "1.0", "seed": 3, "scene": {"n_scenes": 2}, "iterations": 3}"#;

#[test]
fn generate_attack_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let gen = advgps(&["generate", "--config", &cfg, "--out", out]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(Path::new(out).join("scenes/manifest.json").exists());

    let atk = advgps(&["attack", "--config", &cfg, "--out", out, "--method", "rba", "--mask", "xyz"]);
    assert!(atk.status.success(), "{}", String::from_utf8_lossy(&atk.stderr));
    assert!(Path::new(out).join("attacks/rba_xyz/scene_0001.json").exists());

    let ev = advgps(&["eval", "--config", &cfg, "--out", out, "--variant", "B"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let csv = fs::read_to_string(Path::new(out).join("eval/report.csv")).unwrap();
    assert_eq!(String::from_utf8(ev.stdout).unwrap(), csv);
    let conditions: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(conditions, ["no_attack", "no_fusion", "rba_xyz"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("B")));
}

#[test]
fn sweep_single_parameter_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(advgps(&["generate", "--seed", "4", "--out", out]).status.success());
    let ev = advgps(&["eval", "--seed", "4", "--out", out, "--sweep", "y"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = String::from_utf8(ev.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("sweep_y,advgps,y,A,"));
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema_version": "1.0", "seed": 1, "eval_variant": "Z"}"#);
    let run = advgps(&["generate", "--config", &cfg]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("eval_variant"));

    let cfg = write_config(dir.path(), r#"{"schema_version": "1.0"}"#);
    let run = advgps(&["generate", "--config", &cfg]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("seed"));

    assert_eq!(advgps(&["generate"]).status.code(), Some(2));
    assert_eq!(advgps(&["attack", "--seed", "1", "--method", "nope"]).status.code(), Some(2));
}

#[test]
fn missing_scenes_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let out = out.to_str().unwrap();
    assert_eq!(advgps(&["attack", "--seed", "1", "--out", out]).status.code(), Some(3));
    assert_eq!(advgps(&["eval", "--seed", "1", "--out", out]).status.code(), Some(3));
}
