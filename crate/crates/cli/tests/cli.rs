use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qclimit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qclimit")).args(args).output().expect("binary runs")
}

fn shipped(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)).unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_epr() -> String {
    shipped("epr-chsh-optimal.json").replace("\"trials\": 100000", "\"trials\": 2000")
}

#[test]
fn version_names_the_schema() {
    let o = qclimit(&["version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("scenario schema 1"));
}

#[test]
fn shipped_scenarios_validate_cleanly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = qclimit(&["validate", path.to_str().unwrap()]);
        assert_eq!(stdout(&o), "ok: no violations\n", "{}", path.display());
    }
}

#[test]
fn malformed_spec_is_a_schema_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "bad.json", &small_epr().replace("\"trials\": 2000", "\"trials\": \"many\""));
    let o = qclimit(&["run", spec.to_str().unwrap(), "--out-dir", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scenario.trials"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());

    let spec = write_spec(tmp.path(), "kind.json", &small_epr().replace("epr-chsh", "bell"));
    let o = qclimit(&["validate", spec.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[schema] scenario.kind: unknown kind"), "{}", stdout(&o));
}

#[test]
fn validate_reports_every_violated_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let text = shipped("sg-spin-one.json").replace("\"points\": 2048", "\"points\": 256").replace("\"gradient\": 4.0", "\"gradient\": 400.0");
    let spec = write_spec(tmp.path(), "coarse.json", &text);
    let o = qclimit(&["validate", spec.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.ends_with("3 violation(s)\n"), "{out}");
    assert!(out.contains("[resolution] scenario.beam.width"), "{out}");
    assert!(out.contains("[resolution] scenario.beam.momentum"), "{out}");
    assert!(out.contains("[phase-wrap] scenario.apparatus.gradient"), "{out}");

    let run = qclimit(&["run", spec.to_str().unwrap(), "--out-dir", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "epr.json", &small_epr());
    let blocker = write_spec(tmp.path(), "occupied", "");
    let o = qclimit(&["run", spec.to_str().unwrap(), "--out-dir", blocker.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = qclimit(&["run", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn labelling_before_separation_is_a_numerical_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = shipped("sg-spin-one.json")
        .replace("\"duration\": 8.0", "\"duration\": 0.5")
        .replace("\"check_every\": 50}", "\"check_every\": 50}, \"specimens\": 10");
    let spec = write_spec(tmp.path(), "early.json", &text);
    let o = qclimit(&["run", spec.to_str().unwrap(), "--out-dir", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("overlap"));
}

#[test]
fn seed_override_changes_samples_only() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), "epr.json", &small_epr());
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let o = qclimit(&["run", spec.to_str().unwrap(), "--seed", seed, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("chsh.json")).unwrap()).unwrap();
        v
    };
    let (a, b, c) = (run("1", "a"), run("1", "b"), run("2", "c"));
    assert_eq!(a, b);
    assert_eq!(a["seed"], 1);
    assert_eq!(c["seed"], 2);
    assert_eq!(a["analytic"], c["analytic"]);
    assert_ne!(a["sampled"]["counts"], c["sampled"]["counts"]);
}
