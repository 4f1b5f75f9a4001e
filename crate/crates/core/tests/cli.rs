use std::path::Path;
use std::process::{Command, Output};

use bethe_cs::harness::CSV_HEADER;
use bethe_cs::{Instance, SolveReport};

fn bethe_cs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bethe-cs"))
        .args(args)
        .output()
        .unwrap()
}

fn gen(dir: &Path, name: &str, n: &str, m: &str, rho: &str, seed: &str) -> String {
    let path = dir.join(name).to_str().unwrap().to_owned();
    let out = bethe_cs(&[
        "gen",
        "--n",
        n,
        "--m",
        m,
        "--rho",
        rho,
        "--seed",
        seed,
        "--scaling",
        "unit-variance",
        "--out",
        &path,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn generated_instances_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "20", "12", "0.2", "5");
    let text = std::fs::read_to_string(&path).unwrap();
    let inst = Instance::from_json(&text).unwrap();
    assert_eq!((inst.n(), inst.m()), (20, 12));
    assert_eq!(inst.seed(), Some(5));
    assert_eq!(inst.to_json().unwrap(), text);
    let stdout = bethe_cs(&[
        "gen",
        "--n",
        "20",
        "--m",
        "12",
        "--rho",
        "0.2",
        "--seed",
        "5",
        "--scaling",
        "unit-variance",
    ]);
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), text);
}

#[test]
fn bethe_minimization_recovers_an_easy_signal() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "200", "140", "0.1", "1");
    let out = bethe_cs(&["solve", "--instance", &path, "--algo", "bethe-min"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: SolveReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.mse_final.unwrap() <= 1e-6, "mse {:?}", report.mse_final);
    assert!(report.energy_trace.is_empty());
}

#[test]
fn traces_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "40", "30", "0.1", "2");
    let out = bethe_cs(&["solve", "--instance", &path, "--algo", "mf-learn", "--trace"]);
    let report: SolveReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.energy_trace.len(), report.iterations);
    assert_eq!(report.delta_trace.len(), report.iterations);
}

#[test]
fn every_algorithm_name_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "16", "12", "0.1", "3");
    for algo in [
        "mf-seq",
        "mf-learn",
        "ist",
        "amp",
        "amp-damped",
        "gamp",
        "mf-min",
        "mf-learn-min",
        "bethe-min",
    ] {
        // Parallel updates may legitimately diverge at this noise level; the
        // report is still written.
        let out = bethe_cs(&["solve", "--instance", &path, "--algo", algo, "--max-iter", "50"]);
        assert!(
            matches!(out.status.code(), Some(0 | 2)),
            "{algo}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: SolveReport = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report.algo.name(), algo);
    }
}

#[test]
fn sweep_writes_the_csv_schema() {
    let out = bethe_cs(&[
        "sweep",
        "--rho",
        "0.1,0.2",
        "--alpha",
        "0.5:0.6:0.1",
        "--n",
        "32",
        "--trials",
        "2",
        "--algo",
        "amp",
        "--workers",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(!csv.contains('\r') && csv.ends_with('\n'));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.starts_with("0.") && l.ends_with(",amp")));
}

#[test]
fn sweep_output_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let path = dir.path().join(format!("sweep{workers}.csv"));
        let out = bethe_cs(&[
            "sweep",
            "--rho",
            "0.1,0.3",
            "--alpha",
            "0.4,0.7",
            "--n",
            "48",
            "--trials",
            "3",
            "--algo",
            "mf-learn",
            "--seed",
            "9",
            "--workers",
            workers,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        outputs.push(std::fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn self_checks_pass() {
    let out = bethe_cs(&["check"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().count() >= 5);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "8", "6", "0.1", "0");
    let missing = dir.path().join("absent.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["solve", "--instance", &path, "--algo", "belief"],
        vec!["frobnicate"],
        vec!["gen", "--n", "8"],
        vec!["gen", "--n", "8", "--m", "6", "--rho", "1.5"],
        vec!["solve", "--instance", missing.to_str().unwrap()],
        vec!["solve", "--instance", &path, "--damping", "1.0"],
        vec!["sweep", "--rho", "0.1", "--alpha", "0:1"],
    ];
    for args in cases {
        let out = bethe_cs(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    assert_eq!(bethe_cs(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_with_two() {
    // A matrix with a common offset in every entry drives undamped AMP to
    // blow up.
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "inst.json", "128", "80", "0.1", "4");
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let inst = Instance::from_json(&value.to_string()).unwrap();
    let x = inst.x_true().unwrap().to_vec();
    let offset = 8.0;
    let rows: Vec<Vec<f64>> = (0..inst.m())
        .map(|r| (0..inst.n()).map(|c| inst.f().get(r, c) + offset).collect())
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|row| row.iter().zip(&x).map(|(f, x)| f * x).sum())
        .collect();
    value["F"] = serde_json::json!(rows);
    value["y"] = serde_json::json!(y);
    std::fs::write(&path, value.to_string()).unwrap();
    let out = bethe_cs(&["solve", "--instance", &path, "--algo", "amp"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report: SolveReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.diverged);
}
