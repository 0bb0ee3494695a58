//! The `cpak` binary: exit codes, outputs and where it writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn cpak(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpak"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CPAK_CACHE")
        .output()
        .expect("spawn cpak")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn usage_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 7] = [
        &[],
        &["frobnicate"],
        &["gen-data"],
        &["gen-data", "--out", "data", "--size", "30"],
        &["run", "--preset", "no-such-preset", "--out", "run"],
        &["run", "--preset", "smoke"],
        &["--jobs", "0", "selftest"],
    ];
    for args in cases {
        let o = cpak(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty(), "{args:?} printed no diagnostic");
    }
    assert!(entries(dir.path()).is_empty(), "{:?}", entries(dir.path()));
}

#[test]
fn help_and_preset_listing_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cpak(dir.path(), &["--help"]).status.code(), Some(0));
    let o = cpak(dir.path(), &["run", "--list-presets"]);
    assert_eq!(o.status.code(), Some(0));
    let listed = String::from_utf8(o.stdout).unwrap();
    assert!(listed.lines().any(|l| l == "untargeted-stripes"), "{listed}");
}

#[test]
fn selftest_passes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = cpak(dir.path(), &["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
}

#[test]
fn gen_data_reports_json_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpak(dir.path(), &["gen-data", "--out", "data", "--per-class", "2", "--size", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["images"], 12);
    assert_eq!(entries(dir.path()), ["data"]);
}

#[test]
fn run_then_replay_then_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpak(dir.path(), &["run", "--preset", "smoke", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(entries(dir.path()), ["run"], "wrote outside --out");

    let run = dir.path().join("run");
    let csv = fs::read_to_string(run.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "concept,class,layer,attack-tag,score,ci_lo,ci_hi,t,p");

    let o = cpak(dir.path(), &["replay", "run/results.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[1].split(',').collect();
    cells[4] = "0.5";
    lines[1] = cells.join(",");
    fs::write(run.join("scores.csv"), lines.join("\n") + "\n").unwrap();
    let o = cpak(dir.path(), &["replay", "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2, column `score`"), "{}", stderr(&o));
}
