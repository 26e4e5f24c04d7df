use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use hmpc::models::Benchmark;
use hmpc::ocp::OcpSolver;
use hmpc::simulator::{
    measure_iss, run_with_controller, Controller, DecayFit, IssReport, MpcController, SimError, TraceSummary,
};

use crate::config::{ExperimentConfig, SchemeSpec};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("cannot write {0}: {1}")]
    Io(String, std::io::Error),
    #[error("{} run(s) failed: {}", .0.len(), .0.join("; "))]
    Failed(Vec<String>),
}

pub fn sweep_schemes(td: &[f64], ts: &[f64]) -> Vec<SchemeSpec> {
    let mut out = Vec::new();
    for &t_d in td {
        for &t_s in ts.iter().filter(|&&t_s| t_s <= t_d) {
            out.push(SchemeSpec {
                name: format!("td{t_d}_ts{t_s}"),
                t_s,
                t_d,
            });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
struct RunSummary {
    scheme: String,
    seed: u64,
    t_s: f64,
    t_d: f64,
    horizon_steps: usize,
    converged: bool,
    #[serde(flatten)]
    summary: TraceSummary,
    decay_fit: Option<DecayFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iss: Option<IssReport>,
    realtime_rule: &'static str,
}

const REALTIME_RULE: &str = "p95 solve time <= t_s";

fn controller(bench: &Benchmark, cfg: &ExperimentConfig, scheme: &SchemeSpec, seed: u64) -> Result<MpcController, String> {
    let ocp = bench.ocp(scheme.t_d, &cfg.ocp).map_err(|e| e.to_string())?;
    let solver = OcpSolver::new(ocp, cfg.solver).map_err(|e| e.to_string())?;
    let policy = cfg.sim_config(scheme, seed).resolved_warm_start();
    let mut ctrl = MpcController::new(solver, policy);
    if let Ok((_, k)) = bench.lqr() {
        ctrl = ctrl.with_terminal_gain(k);
    }
    Ok(ctrl)
}

fn stem(cfg: &ExperimentConfig, scheme: &SchemeSpec, seed: u64) -> String {
    if cfg.seeds.len() > 1 {
        format!("{}.seed{seed}", scheme.name)
    } else {
        scheme.name.clone()
    }
}

fn run_one(cfg: &ExperimentConfig, bench: &Benchmark, scheme: &SchemeSpec, seed: u64, out: &Path) -> Result<RunSummary, String> {
    let sim = cfg.sim_config(scheme, seed);
    let mut ctrl = controller(bench, cfg, scheme, seed)?;
    let trace = run_with_controller(&bench.model, &mut ctrl, &sim, &bench.x0).map_err(|e| e.to_string())?;
    let summary = TraceSummary::new(&trace, cfg.t_sim, &bench.x_set, &bench.u_set);
    let norms: Vec<f64> = trace.states.iter().map(|x| x.norm()).collect();
    let decay_fit = DecayFit::fit(&trace.times, &norms, 1e-10);
    let iss = match &cfg.iss {
        Some(spec) => {
            let make = || -> Result<Box<dyn Controller>, SimError> {
                controller(bench, cfg, scheme, seed)
                    .map(|c| Box::new(c) as Box<dyn Controller>)
                    .map_err(SimError::Config)
            };
            match measure_iss(&bench.model, make, &sim, &bench.x0, &spec.bounds, &spec.seeds) {
                Ok(r) => Some(r),
                Err(SimError::NotNominallyStable(v)) => Some(IssReport {
                    pairs: Vec::new(),
                    decay: None,
                    nominal_tail: v,
                }),
                Err(e) => return Err(e.to_string()),
            }
        }
        None => None,
    };
    let result = RunSummary {
        scheme: scheme.name.clone(),
        seed,
        t_s: scheme.t_s,
        t_d: scheme.t_d,
        horizon_steps: bench.steps(scheme.t_d).map_err(|e| e.to_string())?,
        converged: summary.converged(cfg.converge_tol),
        summary,
        decay_fit,
        iss,
        realtime_rule: REALTIME_RULE,
    };

    let name = stem(cfg, scheme, seed);
    let csv_path = out.join(format!("{name}.trace.csv"));
    let file = fs::File::create(&csv_path).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    trace
        .write_csv(BufWriter::new(file))
        .map_err(|e| format!("{}: {e}", csv_path.display()))?;
    write_json(&out.join(format!("{name}.summary.json")), &result)?;
    Ok(result)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct Comparison<'a> {
    config: &'a ExperimentConfig,
    realtime_rule: &'static str,
    runs: Vec<RunSummary>,
}

/// Runs every (scheme, seed) pair with at most `workers` concurrent jobs.
/// Returns one human-readable line per run.
pub fn execute(cfg: &ExperimentConfig, workers: usize, sweep: bool) -> Result<Vec<String>, RunError> {
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(|e| RunError::Io(out.display().to_string(), e))?;
    let bench = cfg.validate().map_err(|e| RunError::Failed(vec![e.to_string()]))?;
    let jobs: Vec<(&SchemeSpec, u64)> = cfg
        .schemes
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Failed(vec![e.to_string()]))?;
    let results: Vec<Result<RunSummary, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|(scheme, seed)| {
                catch_unwind(AssertUnwindSafe(|| run_one(cfg, &bench, scheme, *seed, &out)))
                    .unwrap_or_else(|_| Err("panicked".into()))
                    .map_err(|e| format!("{} (seed {seed}): {e}", scheme.name))
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => runs.push(s),
            Err(e) => failures.push(e),
        }
    }
    let lines = runs
        .iter()
        .map(|r| {
            format!(
                "{:<16} seed {:<4} {:>10} converged={} tail={:.3e} viol={:.3e} p50={:.3}ms p95={:.3}ms realtime={}",
                r.scheme,
                r.seed,
                match r.summary.outcome {
                    hmpc::simulator::Outcome::Completed => "completed",
                    hmpc::simulator::Outcome::Diverged { .. } => "diverged",
                },
                r.converged,
                r.summary.tail_limsup,
                r.summary.max_state_violation,
                r.summary.solve_ms_p50,
                r.summary.solve_ms_p95,
                r.summary.realtime_feasible
            )
        })
        .collect();

    if sweep {
        let mut csv = String::from("t_s,t_d,N,converged,limsup,p95_solve_ms,realtime_feasible,seed\n");
        for r in &runs {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.t_s,
                r.t_d,
                r.horizon_steps,
                r.converged,
                r.summary.tail_limsup,
                r.summary.solve_ms_p95,
                r.summary.realtime_feasible,
                r.seed
            );
        }
        let p = out.join("sweep.csv");
        fs::write(&p, csv).map_err(|e| RunError::Io(p.display().to_string(), e))?;
    } else {
        let cmp = Comparison {
            config: cfg,
            realtime_rule: REALTIME_RULE,
            runs,
        };
        write_json(&out.join("comparison.json"), &cmp).map_err(|e| RunError::Failed(vec![e]))?;
    }
    if failures.is_empty() {
        Ok(lines)
    } else {
        Err(RunError::Failed(failures))
    }
}
