use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmpc"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn small_config(out: &Path) -> Value {
    json!({
        "experiment": "double-integrator",
        "schemes": [
            { "name": "HMPC", "t_s": 0.02, "t_d": 0.4 },
            { "name": "MPC2", "t_s": 0.4, "t_d": 0.4 }
        ],
        "t_sim": 3.0,
        "disturbance": { "kind": "piecewise-constant-random", "seed": 0, "hold": 0.5, "amplitude": 0.5 },
        "seeds": [4],
        "output_dir": out.display().to_string()
    })
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Trace CSV with the wall-time column blanked.
fn trace_without_timing(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "solve_ms").unwrap();
    lines
        .map(|l| {
            let mut cells: Vec<String> = l.split(',').map(str::to_string).collect();
            cells[col].clear();
            cells
        })
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bundled_configs_validate() {
    for name in ["double_integrator.json", "double_integrator_iss.json", "lane_change.json"] {
        let out = run(&["run", bundled(name).to_str().unwrap(), "--validate-only"]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("config ok"));
    }
}

#[test]
fn validate_only_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out_dir));
    let out = run(&["run", cfg.to_str().unwrap(), "--validate-only"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!out_dir.exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut bad = Vec::new();
    let mut unknown = small_config(&out_dir);
    unknown["colour"] = json!("red");
    bad.push(unknown);
    let mut not_divisible = small_config(&out_dir);
    not_divisible["schemes"] = json!([{ "name": "x", "t_s": 0.02, "t_d": 0.3 }]);
    bad.push(not_divisible);
    let mut slow_sampling = small_config(&out_dir);
    slow_sampling["schemes"] = json!([{ "name": "x", "t_s": 0.8, "t_d": 0.4 }]);
    bad.push(slow_sampling);
    let mut dup = small_config(&out_dir);
    dup["schemes"] = json!([{ "name": "a", "t_s": 0.4, "t_d": 0.4 }, { "name": "a", "t_s": 0.02, "t_d": 0.4 }]);
    bad.push(dup);
    let mut bad_model = small_config(&out_dir);
    bad_model["model"] = json!({ "u_max": -1.0 });
    bad.push(bad_model);
    for cfg in bad {
        let p = write_config(dir.path(), &cfg);
        let out = run(&["run", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(1), "{cfg}");
    }
    let out = run(&["run", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_traces_summaries_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out_dir));
    let out = run(&["run", cfg.to_str().unwrap(), "--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for scheme in ["HMPC", "MPC2"] {
        let csv = std::fs::read_to_string(out_dir.join(format!("{scheme}.trace.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,u1,d1,solve_ms,event");
        let summary = read_json(&out_dir.join(format!("{scheme}.summary.json")));
        for key in ["tail_limsup", "solve_ms_p50", "solve_ms_p95", "solve_ms_max", "feasibility_events", "decay_fit"] {
            assert!(summary.get(key).is_some(), "{scheme} summary lacks {key}");
        }
    }
    let cmp = read_json(&out_dir.join("comparison.json"));
    assert_eq!(cmp["config"]["experiment"], "double-integrator");
    assert_eq!(cmp["config"]["model"]["u_max"], 10.0);
    let runs = cmp["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        for key in ["converged", "max_state_violation", "solve_ms_p50", "solve_ms_p95", "solve_ms_max", "realtime_feasible"] {
            assert!(r.get(key).is_some(), "run lacks {key}");
        }
        assert_eq!(r["outcome"]["status"], "completed");
    }
}

#[test]
fn rerun_from_comparison_reproduces_traces() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let cfg = write_config(dir.path(), &small_config(&first));
    assert!(run(&["run", cfg.to_str().unwrap()]).status.success());
    let second = dir.path().join("second");
    let cmp = first.join("comparison.json");
    let out = run(&["run", cmp.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for scheme in ["HMPC", "MPC2"] {
        let f = format!("{scheme}.trace.csv");
        assert_eq!(trace_without_timing(&first.join(&f)), trace_without_timing(&second.join(&f)));
    }
}

#[test]
fn seed_flag_overrides_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let mut cfg = small_config(&out_dir);
    cfg["seeds"] = json!([1, 2]);
    cfg["schemes"] = json!([{ "name": "MPC2", "t_s": 0.4, "t_d": 0.4 }]);
    let p = write_config(dir.path(), &cfg);
    assert!(run(&["run", p.to_str().unwrap()]).status.success());
    assert!(out_dir.join("MPC2.seed1.trace.csv").exists());
    assert!(out_dir.join("MPC2.seed2.trace.csv").exists());
    let single = dir.path().join("single");
    assert!(run(&["run", p.to_str().unwrap(), "--seed", "2", "--out", single.to_str().unwrap()])
        .status
        .success());
    assert_eq!(
        trace_without_timing(&single.join("MPC2.trace.csv")),
        trace_without_timing(&out_dir.join("MPC2.seed2.trace.csv"))
    );
}

#[test]
fn degenerate_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut cfg = small_config(&run_dir);
    cfg["schemes"] = json!([{ "name": "HMPC", "t_s": 0.02, "t_d": 0.4 }]);
    let p = write_config(dir.path(), &cfg);
    assert!(run(&["run", p.to_str().unwrap()]).status.success());
    let sweep_dir = dir.path().join("sweep");
    let out = run(&["sweep", p.to_str().unwrap(), "--td", "0.4", "--ts", "0.02", "--out", sweep_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        trace_without_timing(&run_dir.join("HMPC.trace.csv")),
        trace_without_timing(&sweep_dir.join("td0.4_ts0.02.trace.csv"))
    );
    let sweep = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t_s,t_d,N,converged,limsup,p95_solve_ms,realtime_feasible,seed"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["0.02", "0.4", "5"]);
    let summary = read_json(&run_dir.join("HMPC.summary.json"));
    assert_eq!(row[4].parse::<f64>().unwrap(), summary["tail_limsup"].as_f64().unwrap());
}

fn sweep_rows(dir: &Path, cfg: &Value, td: &str, ts: &str) -> Vec<Vec<String>> {
    let p = write_config(dir, cfg);
    let out_dir = dir.join(format!("sweep-{td}-{ts}"));
    let out = run(&["sweep", p.to_str().unwrap(), "--td", td, "--ts", ts, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read_to_string(out_dir.join("sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sweep_solve_time_grows_with_horizon_length() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    cfg["disturbance"] = json!({ "kind": "zero" });
    cfg["t_sim"] = json!(4.0);
    let rows = sweep_rows(dir.path(), &cfg, "0.4,0.2,0.1", "0.02");
    let p95: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    let n: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(n, vec![5, 10, 20]);
    assert!(p95[0] < p95[1] && p95[1] < p95[2], "p95 {p95:?}");
}

#[test]
fn faster_sampling_does_not_worsen_disturbance_tail() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    cfg["t_sim"] = json!(20.0);
    let rows = sweep_rows(dir.path(), &cfg, "0.4", "0.4,0.1,0.02");
    let limsup: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(limsup[1] <= limsup[0] && limsup[2] <= limsup[1], "limsup {limsup:?}");
}

#[test]
fn custom_model_from_path() {
    let dir = tempfile::tempdir().unwrap();
    let model = json!({
        "a": [[0.0, 1.0], [0.0, 0.0]],
        "b": [[0.0], [1.0]],
        "x_set": { "H": [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], "h": [2.0, 2.0, 1.0, 1.0] },
        "u_set": { "H": [[1.0], [-1.0]], "h": [3.0, 3.0] },
        "q": [[1.0, 0.0], [0.0, 1.0]],
        "r": [[0.1]],
        "horizon": 1.0,
        "x0": [1.0, 0.0]
    });
    std::fs::write(dir.path().join("model.json"), model.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let cfg = json!({
        "experiment": "custom-lti",
        "model_path": "model.json",
        "schemes": [{ "name": "HMPC", "t_s": 0.05, "t_d": 0.2 }],
        "t_sim": 8.0,
        "output_dir": out_dir.display().to_string()
    });
    let p = write_config(dir.path(), &cfg);
    let out = run(&["run", p.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp = read_json(&out_dir.join("comparison.json"));
    assert_eq!(cmp["runs"][0]["converged"], true);
    assert_eq!(cmp["config"]["model"]["x0"], json!([1.0, 0.0]));
}

#[test]
fn failing_run_exits_with_two() {
    // An unstable mode the input cannot reach: no stabilizing terminal cost.
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = json!({
        "experiment": "custom-lti",
        "model": {
            "a": [[1.0, 0.0], [0.0, -1.0]],
            "b": [[0.0], [1.0]],
            "x_set": { "H": [[1.0, 0.0], [-1.0, 0.0]], "h": [5.0, 5.0] },
            "u_set": { "H": [[1.0], [-1.0]], "h": [1.0, 1.0] },
            "q": [[1.0, 0.0], [0.0, 1.0]],
            "r": [[1.0]],
            "horizon": 1.0,
            "x0": [0.1, 0.0]
        },
        "schemes": [{ "name": "MPC2", "t_s": 0.5, "t_d": 0.5 }],
        "t_sim": 2.0,
        "output_dir": out_dir.display().to_string()
    });
    let p = write_config(dir.path(), &cfg);
    let out = run(&["run", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_skips_sampling_slower_than_discretization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("unused"));
    cfg["t_sim"] = json!(1.0);
    let rows = sweep_rows(dir.path(), &cfg, "0.2", "0.4,0.2");
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][..2], &["0.2", "0.2"]);
    let p = write_config(dir.path(), &cfg);
    let out = run(&["sweep", p.to_str().unwrap(), "--td", "0.2", "--ts", "0.4"]);
    assert_eq!(out.status.code(), Some(1));
}
