use nalgebra::DVector;
use serde::Serialize;

use super::{run_with_controller, ClosedLoopTrace, Controller, DisturbanceSignal, Outcome, SimConfig, SimError};
use crate::dynamics::ContinuousModel;
use crate::ocp::{OcpError, OcpSolver, SolveStatus};
use crate::sets::Polyhedron;

/// Linear-interpolated percentile, `q ∈ [0, 1]`. `NaN` for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `max ‖x(t)‖` over the final quarter of the run.
fn tail_limsup(trace: &ClosedLoopTrace, t_sim: f64) -> f64 {
    if !matches!(trace.outcome, Outcome::Completed) {
        return f64::INFINITY;
    }
    let start = 0.75 * t_sim;
    trace
        .times
        .iter()
        .zip(&trace.states)
        .filter(|(t, _)| **t >= start - 1e-12)
        .map(|(_, x)| x.norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceSummary {
    pub outcome: Outcome,
    pub final_norm: f64,
    pub tail_limsup: f64,
    pub max_state_violation: f64,
    pub max_input_violation: f64,
    /// Worst violation of each state-constraint row over the run (≥ 0).
    pub state_row_violation: Vec<f64>,
    pub solve_ms_p50: f64,
    pub solve_ms_p95: f64,
    pub solve_ms_max: f64,
    pub samples: usize,
    pub feasibility_events: usize,
    /// `p95` solve time within the sampling time. The 95th percentile is
    /// used so that a single scheduling hiccup does not decide the verdict.
    pub realtime_feasible: bool,
}

impl TraceSummary {
    pub fn new(trace: &ClosedLoopTrace, t_sim: f64, x_set: &Polyhedron, u_set: &Polyhedron) -> Self {
        let mut rows = vec![0.0f64; x_set.n_rows()];
        for x in &trace.states {
            let r = x_set.residual(x);
            for (w, v) in rows.iter_mut().zip(r.iter()) {
                *w = w.max(*v);
            }
        }
        let max_input_violation = trace
            .inputs
            .iter()
            .map(|u| u_set.max_violation(u))
            .fold(0.0, f64::max);
        let ms: Vec<f64> = trace.solve_times().iter().map(|s| s * 1e3).collect();
        let p95 = percentile(&ms, 0.95);
        Self {
            outcome: trace.outcome,
            final_norm: trace.final_state().norm(),
            tail_limsup: tail_limsup(trace, t_sim),
            max_state_violation: rows.iter().copied().fold(0.0, f64::max),
            max_input_violation,
            state_row_violation: rows,
            solve_ms_p50: percentile(&ms, 0.5),
            solve_ms_p95: p95,
            solve_ms_max: ms.iter().copied().fold(0.0, f64::max),
            samples: ms.len(),
            feasibility_events: trace.events.len(),
            realtime_feasible: p95 <= trace.t_s * 1e3,
        }
    }

    /// Completed run whose final state norm is within `tol`.
    pub fn converged(&self, tol: f64) -> bool {
        matches!(self.outcome, Outcome::Completed) && self.final_norm <= tol
    }
}

/// Empirical bound on the discretization error of the first input,
/// `L̂(t_d) = max_x ‖μ*₀(x; t_d) − μ*₀(x; t_ref)‖ / ‖x‖`. States with
/// `‖x‖ < 1e-9`, and states at which the reference problem is not solved
/// to optimality, are skipped.
pub fn estimate_l<F>(family: F, states: &[DVector<f64>], grid: &[f64], t_d_ref: f64) -> Result<Vec<(f64, f64)>, SimError>
where
    F: Fn(f64) -> Result<OcpSolver, OcpError>,
{
    if let Some(&bad) = grid.iter().find(|&&t| t < t_d_ref) {
        return Err(SimError::Config(format!("grid step {bad} is finer than the reference {t_d_ref}")));
    }
    let reference = family(t_d_ref)?;
    let mut kept = Vec::new();
    for x in states.iter().filter(|x| x.norm() >= 1e-9) {
        let sol = reference.solve(x, None)?;
        if sol.status == SolveStatus::Optimal {
            kept.push((x, sol.first_input().clone()));
        }
    }
    let mut out = Vec::with_capacity(grid.len());
    for &t_d in grid {
        let solver = family(t_d)?;
        let mut worst = 0.0f64;
        for (x, u_ref) in &kept {
            let u = solver.solve(x, None)?.first_input().clone();
            worst = worst.max((u - u_ref).norm() / x.norm());
        }
        out.push((t_d, worst));
    }
    Ok(out)
}

/// `‖x(t)‖ ≤ prefactor · e^{−rate t}` fitted on a zero-disturbance run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub prefactor: f64,
}

impl DecayFit {
    /// Least squares on `ln ‖x‖` for points above `floor`; the prefactor
    /// is then raised so that the bound holds at every fitted point.
    pub fn fit(times: &[f64], norms: &[f64], floor: f64) -> Option<Self> {
        let pts: Vec<(f64, f64)> = times
            .iter()
            .zip(norms)
            .filter(|(_, n)| **n > floor)
            .map(|(t, n)| (*t, n.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let k = pts.len() as f64;
        let (mt, ml) = pts.iter().fold((0.0, 0.0), |(a, b), (t, l)| (a + t / k, b + l / k));
        let (sxy, sxx) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), (t, l)| (a + (t - mt) * (l - ml), b + (t - mt).powi(2)));
        if sxx == 0.0 {
            return None;
        }
        let rate = -sxy / sxx;
        let prefactor = pts.iter().map(|(t, l)| (l + rate * t).exp()).fold(0.0, f64::max);
        Some(Self { rate, prefactor })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IssReport {
    /// `(Δ, worst tail limsup over seeds)`; divergence is `+∞`.
    pub pairs: Vec<(f64, f64)>,
    pub decay: Option<DecayFit>,
    pub nominal_tail: f64,
}

impl IssReport {
    /// Largest `limsup / Δ` over the non-zero bounds.
    pub fn gain_bound(&self) -> f64 {
        self.pairs
            .iter()
            .filter(|(d, _)| *d > 0.0)
            .map(|(d, l)| l / d)
            .fold(0.0, f64::max)
    }
}

/// Tail limsup of the closed loop under piecewise-constant random
/// disturbances of each amplitude in `bounds`, worst case over `seeds`.
/// `make` builds a fresh controller per run. The disturbance hold time is
/// taken from `cfg_base` when it already is piecewise random, else 0.5 s.
pub fn measure_iss<F>(
    plant: &ContinuousModel,
    make: F,
    cfg_base: &SimConfig,
    x0: &DVector<f64>,
    bounds: &[f64],
    seeds: &[u64],
) -> Result<IssReport, SimError>
where
    F: Fn() -> Result<Box<dyn Controller>, SimError>,
{
    if 0.25 * cfg_base.t_sim < 10.0 * cfg_base.t_d {
        return Err(SimError::Config(format!(
            "tail window {} s is shorter than 10 t_d = {} s",
            0.25 * cfg_base.t_sim,
            10.0 * cfg_base.t_d
        )));
    }
    let hold = match cfg_base.disturbance {
        DisturbanceSignal::PiecewiseConstantRandom { hold, .. } => hold,
        _ => 0.5,
    };
    let run = |d: DisturbanceSignal| -> Result<ClosedLoopTrace, SimError> {
        let cfg = cfg_base.clone().with_disturbance(d);
        let mut ctrl = make()?;
        run_with_controller(plant, ctrl.as_mut(), &cfg, x0)
    };

    let nominal = run(DisturbanceSignal::Zero)?;
    let nominal_tail = tail_limsup(&nominal, cfg_base.t_sim);
    if !(nominal_tail <= 1e-3) {
        return Err(SimError::NotNominallyStable(nominal_tail));
    }
    let norms: Vec<f64> = nominal.states.iter().map(|x| x.norm()).collect();
    let decay = DecayFit::fit(&nominal.times, &norms, 1e-10);

    let mut pairs = Vec::with_capacity(bounds.len());
    for &delta in bounds {
        let worst = if delta == 0.0 {
            nominal_tail
        } else {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let tr = run(DisturbanceSignal::piecewise(seed, hold, delta))?;
                worst = worst.max(tail_limsup(&tr, cfg_base.t_sim));
            }
            worst
        };
        pairs.push((delta, worst));
    }
    Ok(IssReport {
        pairs,
        decay,
        nominal_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert!(percentile(&[], 0.5).is_nan());
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let n: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let fit = DecayFit::fit(&t, &n, 1e-12).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-9);
        assert!((fit.prefactor - 3.0).abs() < 1e-9);
    }
}
