use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geobeam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geobeam")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios").join(format!("{name}.toml"))
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_suite_succeeds() {
    let o = geobeam(&["verify", "ift"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 3);
}

#[test]
fn unknown_suite_is_a_config_error() {
    let o = geobeam(&["verify", "nonsense"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn stage_commands_need_a_config() {
    assert_eq!(code(&geobeam(&["cover"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&geobeam(&["run", "--config", missing.to_str().unwrap()])), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nunknown_key = true\n").unwrap();
    assert_eq!(code(&geobeam(&["run", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(code(&geobeam(&["frobnicate"])), 2);
    assert_eq!(code(&geobeam(&["verify", "ift", "--threads", "many"])), 2);
}

#[test]
fn cover_stage_writes_only_the_cover() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("sphere_equator");
    let o = geobeam(&["cover", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("cover.toml").exists());
    assert!(dir.path().join("report.json").exists());
    assert!(!dir.path().join("loops.csv").exists());
}

#[test]
fn run_cat_map_with_seed_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("cat_map");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "9", "--threads", "2"];
    let o = geobeam(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("rung_ratio"));
    let report: String = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"seed\": 9"));
}

#[test]
fn failed_invariant_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("coarse.toml");
    // probes one per tube direction miss returns that a four-fold retest sees
    fs::write(
        &cfg,
        r#"schema_version = 1
[model]
kind = "flat_torus"
periods = [6.283185307179586, 6.283185307179586]
[submanifold]
shape = "point"
x = [1.0, 2.0]
[cover]
tau = 0.5
r = 0.1
[window]
t0 = 1.0
t1 = 20.0
probe_density = 1
union_density = 4
[partition]
kind = "single_window"
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = geobeam(&["partition", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL union_non_looping"));
}

#[test]
fn out_defaults_to_scenario_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_file");
    let text = fs::read_to_string(fixture("cat_map")).unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, text.replace("seed = 1", &format!("seed = 1\noutput_dir = {:?}", target.to_str().unwrap()))).unwrap();
    let o = geobeam(&["partition", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("partition.csv").exists());
}
