use std::fs;

use invlab::config::{ExperimentConfig, SuiteKind};
use invlab::model::ModelConfig;
use invlab::runner::{error_status, exit_status, run_experiment, RunOptions};
use invlab::Error;

const QUIET: RunOptions = RunOptions { canonical: true, progress: false };

fn small(model: ModelConfig, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(model);
    cfg.n_paths = 3_000;
    cfg.grid.n_steps = 40;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn empty_suite_list_gives_empty_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelConfig::dgc(), dir.path());
    cfg.suites.clear();
    let out = run_experiment(&cfg, QUIET).unwrap();
    assert!(out.report.entries.is_empty());
    assert!(out.report.pass);
    assert_eq!(exit_status(&out.report), 0);
    assert!(dir.path().join("report.json").is_file());
    let csv = fs::read_to_string(dir.path().join("entries.csv")).unwrap();
    assert_eq!(csv.trim(), "theorem_id,mode,lhs,rhs,se,z,pass");
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"kind": "dgc"}, "n_paths": 10, "surprise": 1}"#).unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(error_status(&err), 2);
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut cfg = small(ModelConfig::dgc(), &out);
    cfg.n_paths = 0;
    let err = run_experiment(&cfg, QUIET).unwrap_err();
    assert_eq!(error_status(&err), 2);
    assert!(!out.exists());
}

#[test]
fn canonical_reports_do_not_depend_on_thread_count() {
    let mut reports = Vec::new();
    for threads in [1, 2] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(ModelConfig::cox(0.2), dir.path());
        cfg.suites = vec![SuiteKind::Transfer, SuiteKind::ClosedForm];
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_experiment(&cfg, QUIET)).unwrap();
        reports.push((fs::read(dir.path().join("report.json")).unwrap(), fs::read(dir.path().join("entries.csv")).unwrap()));
    }
    assert!(reports[0] == reports[1]);
}

#[test]
fn timestamp_only_outside_canonical_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelConfig::cox(0.2), dir.path());
    cfg.suites = vec![SuiteKind::ClosedForm];
    let stamped = run_experiment(&cfg, RunOptions { canonical: false, progress: false }).unwrap();
    assert!(stamped.report.created_at.is_some());
    let canonical = run_experiment(&cfg, QUIET).unwrap();
    assert!(canonical.report.created_at.is_none());
    assert_eq!(stamped.report.fingerprint, canonical.report.fingerprint);
}

#[test]
fn shipped_configs_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 2);
}

#[test]
fn cox_verify_suites_pass_at_small_scale() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelConfig::cox(0.1), dir.path());
    cfg.n_paths = 10_000;
    cfg.suites = vec![SuiteKind::Gate, SuiteKind::Transfer, SuiteKind::ClosedForm];
    let out = run_experiment(&cfg, QUIET).unwrap();
    let failing: Vec<&str> = out.report.failures().map(|e| e.theorem_id.as_str()).collect();
    assert!(failing.is_empty(), "{failing:?}");
    assert!(out.report.sign_convention.is_some());
}
