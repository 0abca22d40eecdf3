use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moeforge(args: &[&str], dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moeforge"));
    cmd.args(args);
    if let Some(d) = dir {
        cmd.arg(d);
    }
    cmd.output().unwrap()
}

fn small_run(out: &Path) {
    let o = moeforge(&["run", "--tasks", "2", "--iterations", "20", "--out"], Some(out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_then_report_rebuilds_the_same_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    small_run(&out);
    let before = fs::read(out.join("metrics.csv")).unwrap();
    fs::remove_file(out.join("metrics.csv")).unwrap();
    let o = moeforge(&["report"], Some(&out));
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), before);
    let ini = fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(ini.contains("tasks = 2"), "{ini}");
}

#[test]
fn report_falls_back_to_latest_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    small_run(&out);
    let before = fs::read(out.join("accuracy_matrix.csv")).unwrap();
    fs::remove_file(out.join("run.json")).unwrap();
    fs::remove_file(out.join("accuracy_matrix.csv")).unwrap();
    assert_eq!(moeforge(&["report"], Some(&out)).status.code(), Some(0));
    assert_eq!(fs::read(out.join("accuracy_matrix.csv")).unwrap(), before);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(moeforge(&["report"], Some(tmp.path())).status.code(), Some(1));
    assert_eq!(moeforge(&["run", "--experts", "1"], None).status.code(), Some(2));
    assert_eq!(moeforge(&["frobnicate"], None).status.code(), Some(2));
    let ok = moeforge(&["verify-fixtures"], None);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = moeforge(&["verify-fixtures", "--perturb", "MA:11:4:5"], None);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL MA last DTD"));
}
