use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_transport-bench");

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

const SMALL: &str = "n_particles = 100\nn_replications = 3\nseed = 5\nlambda_steps = 4\n";

fn stable_columns(csv_text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let h = r.headers().unwrap().clone();
    let skip: Vec<usize> = ["cpu_seconds", "fom"]
        .iter()
        .map(|c| h.iter().position(|x| x == *c).unwrap())
        .collect();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| !skip.contains(i))
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn run_writes_reports_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "pf",
        "--method",
        "rw-homotopy",
        "--emit-paths",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with(
        "method,n_particles,n_steps,m_s,mean,st_dev,rmse,bias,rrmse,rel_error,cpu_seconds,fom,seed\n"
    ));
    assert_eq!(stdout.lines().count(), 3);
    for f in [
        "reports.csv",
        "report_pf.json",
        "report_rw-homotopy.json",
        "paths_pf.csv",
        "paths_rw-homotopy.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(out_dir.join("reports.csv")).unwrap(),
        stdout
    );
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "mc",
        "--particles",
        "50",
        "--steps",
        "16",
        "--replications",
        "4",
        "--seed",
        "77",
        "--ess-threshold",
        "0.3",
        "--lambda-steps",
        "3",
        "--fixed-path",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.starts_with("mc,50,16,4,"), "{row}");
    assert!(row.ends_with(",77"), "{row}");
}

#[test]
fn repeated_runs_agree_except_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = run(&["run", "--config", cfg.to_str().unwrap()]);
    let b = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(a.status.success() && b.status.success());
    let (a, b) = (
        String::from_utf8(a.stdout).unwrap(),
        String::from_utf8(b.stdout).unwrap(),
    );
    assert_eq!(stable_columns(&a), stable_columns(&b));
    assert_eq!(stable_columns(&a).len(), 4);
}

fn error_json(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON record: {stderr}"))
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--method", "qmc"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");
}

#[test]
fn missing_config_reports_io_error() {
    let o = run(&["run", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "io");
    assert!(e["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/exp.toml"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_replications = 1\n");
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "insufficient_replications");

    let cfg = write_config(dir.path(), "n_particle = 10\n");
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(error_json(&o)["error"], "config");

    let cfg = write_config(dir.path(), SMALL);
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--ess-threshold",
        "2",
    ]);
    assert_eq!(error_json(&o)["error"], "invalid_params");
}
