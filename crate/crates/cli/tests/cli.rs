use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn invlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invlab")).args(args).output().expect("spawn invlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn cox_config(dir: &Path) -> String {
    let path = dir.join("cox.toml");
    fs::write(
        &path,
        r#"
n_paths = 4000
seed = 3
suites = ["transfer", "closed_form"]

[model]
kind = "cox"
cox_hazard = { form = "constant", rate = 0.1 }

[grid]
n_steps = 50
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_requires_a_config() {
    let o = invlab(&["run", "-q"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ \"n_paths\": ").unwrap();
    let out = dir.path().join("out");
    let o = invlab(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn zero_paths_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cox_config(dir.path());
    let out = dir.path().join("out");
    let o = invlab(&["run", &cfg, "--paths", "0", "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn passing_run_writes_report_and_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cox_config(dir.path());
    let out = dir.path().join("out");
    let o = invlab(&["run", &cfg, "--out", out.to_str().unwrap(), "--canonical", "-q"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["n_paths"], 4000);
    assert!(report.get("created_at").is_none());
    let csv = fs::read_to_string(out.join("entries.csv")).unwrap();
    assert!(csv.starts_with("theorem_id,mode,lhs,rhs,se,z,pass\n"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failing"));
}

#[test]
fn canonical_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cox_config(dir.path());
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("out{threads}"));
        let o = invlab(&["run", &cfg, "--out", out.to_str().unwrap(), "--canonical", "--threads", threads, "-q"]);
        assert_eq!(code(&o), 0);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert!(reports[0] == reports[1]);
}

#[test]
fn seed_flag_changes_the_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cox_config(dir.path());
    let mut prints = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("s{seed}"));
        let o = invlab(&["run", &cfg, "--seed", seed, "--out", out.to_str().unwrap(), "--canonical", "-q"]);
        assert_eq!(code(&o), 0);
        let r: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        prints.push(r["fingerprint"].as_str().unwrap().to_owned());
    }
    assert_ne!(prints[0], prints[1]);
}

#[test]
fn model_probe_prints_json_lines() {
    let o = invlab(&["model", "probe", "--kind", "cox", "--t", "0.5,1", "--m", "-1,0,1"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert!((l["gamma"].as_f64().unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(l["mu"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn dgc_probe_is_positive() {
    let o = invlab(&["model", "probe", "--m", "-2,2"]);
    assert_eq!(code(&o), 0);
    for l in String::from_utf8(o.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let s = v["s"].as_f64().unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert!(v["gamma"].as_f64().unwrap() >= 0.0);
    }
}
