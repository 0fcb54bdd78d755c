use std::path::Path;
use std::process::{Command, Output};

fn profit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_profit"))
        .args(args)
        .env_remove("PROFIT_THREADS")
        .output()
        .expect("binary runs")
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).display().to_string();
    let mut args = vec!["simulate", "--n", "40", "--m", "4:6", "--r", "31", "--seed", "1", "--out", &path];
    args.extend_from_slice(extra);
    let out = profit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let out = profit(&["test", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--input", "--alpha", "--nsim", "--seed", "--method", "--bootstrap", "--out", "--pve", "--pve-t", "--p ",
        "--max-k", "--weights", "--covariate", "--threads",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for default in ["[default: 0.05]", "[default: 10000]", "[default: 0.9]", "[default: 15]", "[default: 1000]"] {
        assert!(text.contains(default), "missing {default}");
    }
    let top = String::from_utf8(profit(&["--help"]).stdout).unwrap();
    for cmd in ["test", "simulate", "size", "power", "timing", "null-dist", "basis"] {
        assert!(top.contains(cmd), "missing subcommand {cmd}");
    }
    let size = String::from_utf8(profit(&["size", "--help"]).stdout).unwrap();
    for default in ["[default: 200]", "[default: 8:12]", "[default: 400]", "[default: profit]"] {
        assert!(size.contains(default), "missing {default}");
    }
}

#[test]
fn missing_input_exits_ten() {
    let out = profit(&["test", "--input", "no/such/file.csv"]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn seed_is_required_for_simulations() {
    for cmd in [&["simulate"][..], &["size"], &["power"], &["null-dist"]] {
        let out = profit(cmd);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    }
}

#[test]
fn test_report_is_deterministic_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let args = ["test", "--input", &data, "--nsim", "2000", "--seed", "7"];
    let a = profit(&args);
    let code = a.status.code().unwrap();
    assert!(code == 0 || code == 3, "{}", String::from_utf8_lossy(&a.stderr));
    let mut one = args.to_vec();
    one.extend(["--threads", "1"]);
    let b = profit(&one);
    assert_eq!(a.stdout, b.stdout);
    let report = stdout_json(&a);
    assert_eq!(report["schema"], "profit-report/1");
    assert_eq!(report["seed"], 7);
    let expected = if report["reject"].as_bool().unwrap() { 3 } else { 0 };
    assert_eq!(code, expected);
}

#[test]
fn strong_trend_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "trend.csv", &["--delta", "6"]);
    let out = profit(&["test", "--input", &data, "--nsim", "2000", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["decision"], "reject");
}

#[test]
fn competitor_runs_on_same_projections() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let out = profit(&["test", "--input", &data, "--nsim", "2000", "--seed", "3", "--method", "zc-mc"]);
    assert!(out.status.code().unwrap() < 10);
    let v = stdout_json(&out);
    assert_eq!(v["competitor"]["method"], "ZC-MC");
    assert_eq!(v["profit"]["basis"]["hash"], v["competitor"]["basis"]["hash"]);
    let bad = profit(&["test", "--input", &data, "--method", "profit"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn covariate_path_and_unknown_covariate() {
    let dir = tempfile::tempdir().unwrap();
    let plain = simulate(dir.path(), "d.csv", &[]);
    let text = std::fs::read_to_string(&plain).unwrap();
    let mut lines = text.lines();
    let mut with_age = format!("{},Age\n", lines.next().unwrap());
    for line in lines {
        let id: usize = line[1..line.find(',').unwrap()].parse().unwrap();
        with_age.push_str(&format!("{line},{}\n", 30 + id % 17));
    }
    let path = dir.path().join("age.csv");
    std::fs::write(&path, with_age).unwrap();
    let path = path.display().to_string();
    let out = profit(&["test", "--input", &path, "--nsim", "2000", "--covariate", "Age"]);
    assert!(out.status.code().unwrap() < 10, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["config"]["covariates"][0], "Age");
    let out = profit(&["test", "--input", &plain, "--covariate", "Weight"]);
    assert!(out.status.code().unwrap() >= 10);
}

#[test]
fn invalid_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let out = profit(&["test", "--input", &data, "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(13));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn constant_curves_name_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("subject_id,t,s,y\n");
    for i in 0..10 {
        for j in 0..4 {
            for k in 0..11 {
                csv.push_str(&format!("a{i},{},{},1.5\n", (i + j * 7) as f64 / 40.0, k as f64 / 10.0));
            }
        }
    }
    let path = dir.path().join("flat.csv");
    std::fs::write(&path, csv).unwrap();
    let out = profit(&["test", "--input", path.to_str().unwrap(), "--nsim", "2000"]);
    assert!(out.status.code().unwrap() >= 10);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("basis") && msg.contains("no variation"), "{msg}");
}

#[test]
fn simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a.csv", &[]);
    let b = simulate(dir.path(), "b.csv", &[]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    let stdout = profit(&["simulate", "--n", "5", "--m", "2:3", "--r", "11", "--seed", "9"]);
    assert!(String::from_utf8(stdout.stdout).unwrap().starts_with("subject_id,t,s,y\n"));
}

#[test]
fn null_dist_zero_mass() {
    let dir = tempfile::tempdir().unwrap();
    let draws = dir.path().join("draws.txt");
    let out = profit(&[
        "null-dist", "--zeta", "1", "--xi", "1", "--p", "0", "--nsim", "100000", "--seed", "2", "--out",
        draws.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    let zero = v["zero_mass"].as_f64().unwrap();
    // Binomial standard error at 1e5 draws is 0.0015.
    assert!((zero - 0.682_689).abs() < 0.006, "{zero}");
    assert_eq!(std::fs::read_to_string(draws).unwrap().lines().count(), 100_000);
    let again = profit(&["null-dist", "--zeta", "1", "--xi", "1", "--p", "0", "--nsim", "100000", "--seed", "2"]);
    assert_eq!(out.stdout, again.stdout);
    let bad = profit(&["null-dist", "--zeta", "1,2", "--xi", "1", "--seed", "2"]);
    assert_eq!(bad.status.code(), Some(13));
}

#[test]
fn basis_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let table = dir.path().join("phi.csv");
    let out = profit(&["basis", "--input", &data, "--out", table.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let k = v["k"].as_u64().unwrap() as usize;
    assert!(k >= 1);
    let text = std::fs::read_to_string(table).unwrap();
    assert_eq!(text.lines().count(), 32);
    assert_eq!(text.lines().next().unwrap().split(',').count(), k + 1);
}

#[test]
fn small_size_and_power_runs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cells.csv");
    let args = [
        "size", "--n", "30", "--m", "3:4", "--r", "21", "--reps", "100", "--nsim", "1000", "--seed", "3", "--alpha",
        "0.05", "--csv", csv.to_str().unwrap(),
    ];
    let a = profit(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let v = stdout_json(&a);
    assert_eq!(v["kind"], "size");
    let rate = v["cells"][0]["rate"].as_f64().unwrap();
    assert!((0.0..=0.2).contains(&rate), "{rate}");
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);
    let b = profit(&args);
    let strip = |o: &Output| {
        let mut v = stdout_json(o);
        for c in v["cells"].as_array_mut().unwrap() {
            c.as_object_mut().unwrap().remove("median_seconds");
        }
        v
    };
    assert_eq!(strip(&a), strip(&b));

    let curves = dir.path().join("curves.csv");
    let p = profit(&[
        "power", "--n", "30", "--m", "3:4", "--deltas", "0,3", "--reps", "100", "--nsim", "1000", "--seed", "4",
        "--alpha", "0.05", "--curves", curves.to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let v = stdout_json(&p);
    assert_eq!(v["cells"].as_array().unwrap().len(), 2);
    assert!(std::fs::metadata(curves).unwrap().len() > 0);
}

#[test]
fn timing_reports_each_method() {
    let out = profit(&["timing", "--n", "30", "--m", "3:4", "--reps", "5", "--nsim", "1000", "--bootstrap", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let methods = v["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 3);
    for m in methods {
        assert_eq!(m["samples"].as_array().unwrap().len(), 5);
    }
}
