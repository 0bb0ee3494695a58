//! End-to-end runs of the smallest scenario: outputs, replay and tampering.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use cpak_core::harness::{self, ExperimentConfig, ExperimentResult, RunOptions, SCORES_FILE, SCORES_HEADER};

struct Smoke {
    _dir: tempfile::TempDir,
    out: PathBuf,
    result: ExperimentResult,
}

fn run_smoke(out: &Path) -> ExperimentResult {
    let cfg = ExperimentConfig::preset("smoke").unwrap();
    let opts = RunOptions {
        out: out.to_path_buf(),
        ..Default::default()
    };
    harness::run(&cfg, &opts).unwrap()
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let result = run_smoke(&out);
        Smoke { _dir: dir, out, result }
    })
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A private copy of the smoke run that a test may modify.
fn scratch_copy() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    copy_dir(&smoke().out, &out);
    (dir, out)
}

#[test]
fn smoke_run_writes_its_tables() {
    let s = smoke();
    let csv = fs::read_to_string(s.out.join(SCORES_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SCORES_HEADER.join(","));
    assert_eq!(csv.lines().count(), s.result.scores.len() + 1);
    for f in ["results.json", "claims.json", "config.json", "models/subject.cpak"] {
        assert!(s.out.join(f).is_file(), "{f} missing");
    }
    assert!(!s.result.seeds.is_empty());
    assert_eq!(ExperimentResult::load(&s.out).unwrap(), s.result);
}

#[test]
fn smoke_run_replays_cleanly() {
    let report = harness::replay(&smoke().out).unwrap();
    assert!(report.ok(), "{:?}", report.mismatches);
    assert!(report.artifacts_checked > 0 && report.cells_checked > 0);
}

#[test]
fn same_seed_gives_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    run_smoke(dir.path());
    let a = fs::read(dir.path().join(SCORES_FILE)).unwrap();
    let b = fs::read(smoke().out.join(SCORES_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tampered_score_is_reported_by_coordinate() {
    let (_keep, out) = scratch_copy();
    let path = out.join(SCORES_FILE);
    let csv = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    let col = SCORES_HEADER.iter().position(|c| *c == "score").unwrap();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[col] = "0.123456".into();
    lines[1] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let report = harness::replay(&out).unwrap();
    assert!(!report.ok());
    let msg = report.mismatches.join("\n");
    assert!(msg.contains("line 2, column `score`"), "{msg}");
}

#[test]
fn tampered_artifact_fails_its_hash() {
    let (_keep, out) = scratch_copy();
    let victim = &smoke().result.artifacts[0].path;
    let mut bytes = fs::read(out.join(victim)).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(out.join(victim), bytes).unwrap();
    let report = harness::replay(&out).unwrap();
    assert!(report.mismatches.iter().any(|m| m.starts_with(victim.as_str())), "{:?}", report.mismatches);
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    assert!(ExperimentConfig::preset("no-such-preset").is_err());
    assert!(ExperimentConfig::from_json(r#"{"scenario": "untargeted-tcav", "bogus": 1}"#).is_err());

    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.attack.epsilon = -1.0;
    assert!(cfg.validate().is_err());

    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.pairs[0].class = "no-such-class".into();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let opts = RunOptions {
        out: out.clone(),
        ..Default::default()
    };
    assert!(harness::run(&cfg, &opts).is_err());
    assert!(!out.exists());
}
