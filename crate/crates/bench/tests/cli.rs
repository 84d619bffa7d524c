use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilevel-lab"))
        .args(args)
        .env_remove("BILEVEL_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn run_to(verb: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![verb, cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lab(&args)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn minimal_config_writes_eleven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_to("run", &config("minimal.json"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read(&dir.path().join("trace.csv"));
    assert_eq!(trace.lines().count(), 12);
    for f in ["instance.json", "resolved_config.json", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("resolved_config.json"))).unwrap();
    let solver = &meta["solver"];
    for key in ["n", "m", "l_phi", "mu_x", "tau_cost", "agd", "hb", "inner_budget"] {
        assert!(!solver[key].is_null(), "{key} missing from metadata");
    }
    assert!(meta["fd_check"]["max_rel_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run_to("run", &config("scsc_benchmark.json"), d.path(), &["--seed", "11"]).status.success());
    }
    for f in ["trace.csv", "summary.csv", "resolved_config.json", "instance.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn scsc_benchmark_reaches_eps() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_to("run", &config("scsc_benchmark.json"), dir.path(), &[]).status.success());
    let gaps = column(&read(&dir.path().join("trace.csv")), "phi_gap");
    let last: f64 = gaps.last().unwrap().parse().unwrap();
    assert!(last <= 1e-6, "final gap {last}");
}

#[test]
fn tau_cost_flag_reweights_complexity() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_to("run", &config("minimal.json"), dir.path(), &["--tau-cost", "5"]).status.success());
    let csv = read(&dir.path().join("trace.csv"));
    let last = csv.lines().last().unwrap().split(',').map(str::to_string).collect::<Vec<_>>();
    let n: Vec<f64> = last[4..8].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(n[3], n[0] + 5.0 * (n[1] + n[2]));
}

#[test]
fn config_errors_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"instance\": {\"kind\": \"decoupled\"},\n  \"solver\": {\"algorithm\": \"accbio\", \"k\": 10, \"eps\": 1e-6, \"typo\": 1}\n}\n").unwrap();
    let out = run_to("run", &bad, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("typo"), "{err}");

    std::fs::write(&bad, r#"{"instance": {"kind": "decoupled"}, "solver": {"algorithm": "accbio", "k": 10, "eps": 0}}"#).unwrap();
    let out = run_to("run", &bad, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.eps"));

    assert_eq!(lab(&["run"]).status.code(), Some(1));
    assert_eq!(run_to("run", &dir.path().join("missing.json"), dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn divergence_exits_two_and_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.json");
    std::fs::write(
        &cfg,
        r#"{"instance": {"kind": "decoupled"},
            "solver": {"algorithm": "baseline_aid_gd", "k": 200, "n": 10, "m": 10, "eps": 1e-6, "stepsize": 5.0}}"#,
    )
    .unwrap();
    let out = run_to("run", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read(&dir.path().join("out/trace.csv"));
    let rows = trace.lines().count() - 1;
    assert!(rows > 1 && rows < 201, "{rows}");
    assert!(read(&dir.path().join("out/summary.csv")).contains("diverged@"));
}

#[test]
fn env_override_sits_between_flag_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let status = Command::new(env!("CARGO_BIN_EXE_bilevel-lab"))
        .args(["run", config("minimal.json").to_str().unwrap()])
        .env("BILEVEL_LAB_OUT", &env_out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(env_out.join("trace.csv").exists());
    let flag_out = dir.path().join("from_flag");
    let status = Command::new(env!("CARGO_BIN_EXE_bilevel-lab"))
        .args(["run", config("minimal.json").to_str().unwrap(), "--out", flag_out.to_str().unwrap()])
        .env("BILEVEL_LAB_OUT", dir.path().join("unused"))
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(flag_out.join("trace.csv").exists() && !dir.path().join("unused").exists());
}

#[test]
fn single_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.json");
    let mut doc: serde_json::Value = serde_json::from_str(&read(&config("scsc_benchmark.json"))).unwrap();
    doc["sweep"] = serde_json::json!({"axis": "eps", "values": [1e-6]});
    std::fs::write(&cfg, doc.to_string()).unwrap();
    assert!(run_to("sweep", &cfg, &dir.path().join("sweep"), &[]).status.success());
    assert!(run_to("run", &config("scsc_benchmark.json"), &dir.path().join("run"), &[]).status.success());
    assert_eq!(read(&dir.path().join("sweep/point_0/trace.csv")), read(&dir.path().join("run/trace.csv")));
    let summary = read(&dir.path().join("sweep/sweep_summary.csv"));
    assert_eq!(summary.lines().next().unwrap(), "axis_value,complexity_to_eps,final_gap");
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn sweep_marks_failures_and_fails_only_when_all_do() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.json");
    std::fs::write(
        &cfg,
        r#"{"instance": {"kind": "scsc"},
            "solver": {"algorithm": "accbio", "k": 5, "eps": 1e-3},
            "sweep": {"axis": "d", "values": [2, 8]}}"#,
    )
    .unwrap();
    let out = run_to("sweep", &cfg, &dir.path().join("mixed"), &["--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read(&dir.path().join("mixed/sweep_summary.csv"));
    assert!(summary.lines().nth(1).unwrap().ends_with("failed,failed"), "{summary}");
    assert!(!summary.lines().nth(2).unwrap().contains("failed"));

    std::fs::write(
        &cfg,
        r#"{"instance": {"kind": "scsc"},
            "solver": {"algorithm": "accbio", "k": 5, "eps": 1e-3},
            "sweep": {"axis": "d", "values": [2, 3]}}"#,
    )
    .unwrap();
    let out = run_to("sweep", &cfg, &dir.path().join("all"), &[]);
    assert_ne!(out.status.code(), Some(0));
    assert!(dir.path().join("all/sweep_summary.csv").exists());
}

#[test]
fn verify_lb_passes_and_corruption_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_to("verify-lb", &config("lower_bounds.json"), &dir.path().join("ok"), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("ok/lower_bound_report.json"))).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["items"].as_array().unwrap().len(), 11);

    let mut doc: serde_json::Value = serde_json::from_str(&read(&config("lower_bounds.json"))).unwrap();
    doc["lower_bound"]["scsc"]["corrupt_b_tilde"] = serde_json::json!(true);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, doc.to_string()).unwrap();
    let out = run_to("verify-lb", &bad, &dir.path().join("bad"), &[]);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("bad/lower_bound_report.json"))).unwrap();
    let failed: Vec<&str> = report["failed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(failed, ["scsc/certificate/d=16/corrupted", "scsc/certificate/d=32/corrupted"]);
}

#[test]
fn report_tabulates_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_to("run", &config("minimal.json"), &dir.path().join("a"), &[]).status.success());
    assert!(run_to("run", &config("scsc_benchmark.json"), &dir.path().join("b"), &[]).status.success());
    let out = lab(&["report", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let table = read(&dir.path().join("report.csv"));
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("a/trace.csv,11,completed"));
    assert!(table.lines().nth(2).unwrap().contains("reached_target@"));
    assert_eq!(lab(&["report", dir.path().join("nope").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn eps_sweep_is_linear_in_log_eps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_to("sweep", &config("eps_sweep.json"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("sweep_meta.json"))).unwrap();
    assert_eq!(meta["failures"], 0);
    assert_eq!(meta["unreached"], 0);
    let fit = &meta["semilog_fit"];
    assert!(fit["slope"].as_f64().unwrap() < 0.0);
    assert!(fit["max_rel_residual"].as_f64().unwrap() <= 0.25);
}
