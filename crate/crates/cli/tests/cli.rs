use std::path::Path;
use std::process::{Command, Output};

fn bbmlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbmlab")).args(args).current_dir(cwd).output().expect("run bbmlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn oracle_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bbmlab(&["verify", "--suite", "oracle", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bbmlab(&["simulate", "--config", "missing.toml"], dir.path())), 2);
    assert_eq!(code(&bbmlab(&["simulate", "--set", "horizon=3"], dir.path())), 2);
    assert_eq!(code(&bbmlab(&["simulate", "--set", "horizon_t=-3"], dir.path())), 2);
    assert_eq!(code(&bbmlab(&["limit"], dir.path())), 2);
    let o = bbmlab(&["report", "empty"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no records"));
}

#[test]
fn simulate_writes_outputs_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "horizon_t = 3.0\nlevels = [0.0, 1.0]\n").unwrap();
    let o = bbmlab(&["simulate", "--config", "run.toml", "--replicates", "30", "--out", "a"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["records.jsonl", "summary.csv", "manifest.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    assert!(csv.starts_with("experiment,statistic,n,mean,se,extra"));
    assert!(csv.contains("simulate,size,30,"));
    assert_eq!(std::fs::read_to_string(dir.path().join("a/records.jsonl")).unwrap().lines().count(), 30);

    let o = bbmlab(&["simulate", "--set", "horizon_t=2", "--replicates", "10", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(code(&bbmlab(&["report", "a"], dir.path())), 0);
    assert_eq!(code(&bbmlab(&["report", "a", "b"], dir.path())), 2);
    let o = bbmlab(&["report", "a", "b", "--force"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate,size,40,"));
}

#[test]
fn extremal_records_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let o = bbmlab(&["extremal", "--set", "horizon_t=6", "--set", "v=1", "--replicates", "8"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.contains("extremal,local_maxima,8,"));
}
