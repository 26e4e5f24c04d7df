//! Sampled-data closed loop: the plant is integrated with RK4 at step
//! `t_p`, the controller is evaluated every `t_s` on the sampled state, and
//! its output is held until the next sample.

mod analysis;
mod disturbance;

pub use analysis::{estimate_l, measure_iss, percentile, DecayFit, IssReport, TraceSummary};
pub use disturbance::DisturbanceSignal;

use std::io::{self, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rk4_step, ContinuousModel};
use crate::ocp::{DiscreteOcp, OcpError, OcpSolution, OcpSolver, OcpWarmStart, SolveStatus};
use crate::qp::QpSettings;

/// States with a norm above this end the run as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("zero-disturbance run does not settle (tail norm {0:e})")]
    NotNominallyStable(f64),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "MPC1")]
    Mpc1,
    #[serde(rename = "HMPC")]
    Hmpc,
    #[serde(rename = "MPC2")]
    Mpc2,
    #[default]
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStartPolicy {
    /// `Shift` when `t_s ≥ t_d`, otherwise `Reuse`.
    #[default]
    Auto,
    /// Drop the first stage of the previous solution.
    Shift,
    /// Start from the previous solution as is.
    Reuse,
    Cold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub t_s: f64,
    pub t_d: f64,
    pub t_sim: f64,
    /// Plant step; `t_s / 20` when absent.
    #[serde(default)]
    pub t_p: Option<f64>,
    #[serde(default)]
    pub disturbance: DisturbanceSignal,
    #[serde(default)]
    pub scheme: Scheme,
    /// Apply each new input only after its measured solve time has elapsed
    /// (rounded up to plant steps, capped at one sample).
    #[serde(default)]
    pub inject_delay: bool,
    #[serde(default)]
    pub warm_start: WarmStartPolicy,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    (n >= 1.0 && (r - n).abs() <= 1e-9 * r.max(1.0)).then_some(n as usize)
}

impl SimConfig {
    pub fn new(t_s: f64, t_d: f64, t_sim: f64) -> Self {
        Self {
            t_s,
            t_d,
            t_sim,
            t_p: None,
            disturbance: DisturbanceSignal::Zero,
            scheme: Scheme::Custom,
            inject_delay: false,
            warm_start: WarmStartPolicy::Auto,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_disturbance(mut self, d: DisturbanceSignal) -> Self {
        self.disturbance = d;
        self
    }

    pub fn with_plant_step(mut self, t_p: f64) -> Self {
        self.t_p = Some(t_p);
        self
    }

    pub fn plant_step(&self) -> f64 {
        self.t_p.unwrap_or(self.t_s / 20.0)
    }

    pub fn ticks_per_sample(&self) -> usize {
        integer_ratio(self.t_s, self.plant_step()).unwrap_or(1)
    }

    pub fn total_ticks(&self) -> usize {
        (self.t_sim / self.plant_step() - 1e-9).ceil().max(0.0) as usize
    }

    pub fn resolved_warm_start(&self) -> WarmStartPolicy {
        match self.warm_start {
            WarmStartPolicy::Auto if self.t_s >= self.t_d || same_time(self.t_s, self.t_d) => WarmStartPolicy::Shift,
            WarmStartPolicy::Auto => WarmStartPolicy::Reuse,
            p => p,
        }
    }

    /// Checks step ordering, integer ratios and scheme labels. `horizon` is
    /// the prediction horizon `T`.
    pub fn validate(&self, horizon: f64) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let t_p = self.plant_step();
        for (name, v) in [("t_s", self.t_s), ("t_d", self.t_d), ("t_sim", self.t_sim), ("t_p", t_p)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if t_p > self.t_s * (1.0 + 1e-12) || self.t_s > self.t_sim * (1.0 + 1e-12) {
            return bad(format!(
                "need t_p <= t_s <= t_sim, got t_p={t_p}, t_s={}, t_sim={}",
                self.t_s, self.t_sim
            ));
        }
        if integer_ratio(self.t_s, t_p).is_none() {
            return bad(format!("t_s = {} is not a multiple of t_p = {t_p}", self.t_s));
        }
        if integer_ratio(horizon, self.t_d).is_none() {
            return bad(format!("horizon {horizon} is not a multiple of t_d = {}", self.t_d));
        }
        if self.t_s > self.t_d && !same_time(self.t_s, self.t_d) {
            return bad(format!("t_s = {} exceeds t_d = {}", self.t_s, self.t_d));
        }
        match self.scheme {
            Scheme::Mpc1 | Scheme::Mpc2 if !same_time(self.t_s, self.t_d) => {
                bad(format!("{:?} requires t_s = t_d, got {} and {}", self.scheme, self.t_s, self.t_d))
            }
            Scheme::Hmpc if !(self.t_s < self.t_d) || same_time(self.t_s, self.t_d) => {
                bad(format!("HMPC requires t_s < t_d, got {} and {}", self.t_s, self.t_d))
            }
            _ => Ok(()),
        }
    }
}

/// Output of one controller evaluation.
#[derive(Clone, Debug)]
pub struct ControlAction {
    pub u: DVector<f64>,
    pub solve_time: f64,
    pub iterations: usize,
    pub event: Option<String>,
}

pub trait Controller {
    fn input_dim(&self) -> usize;
    fn act(&mut self, t: f64, x: &DVector<f64>) -> ControlAction;
}

/// Fixed state feedback `u = −K x`.
#[derive(Clone, Debug)]
pub struct LinearFeedback {
    pub gain: DMatrix<f64>,
}

impl Controller for LinearFeedback {
    fn input_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn act(&mut self, _t: f64, x: &DVector<f64>) -> ControlAction {
        ControlAction {
            u: -(&self.gain * x),
            solve_time: 0.0,
            iterations: 0,
            event: None,
        }
    }
}

/// Receding-horizon controller around one OCP solver instance.
#[derive(Clone, Debug)]
pub struct MpcController {
    solver: OcpSolver,
    policy: WarmStartPolicy,
    terminal_gain: Option<DMatrix<f64>>,
    prev: Option<OcpSolution>,
    last_u: DVector<f64>,
}

impl MpcController {
    pub fn new(solver: OcpSolver, policy: WarmStartPolicy) -> Self {
        let m = solver.ocp().model_d.m();
        Self {
            solver,
            policy,
            terminal_gain: None,
            prev: None,
            last_u: DVector::zeros(m),
        }
    }

    /// Fills the freed last stage of a shifted warm start with `−K ξ_N`.
    pub fn with_terminal_gain(mut self, k: DMatrix<f64>) -> Self {
        self.terminal_gain = Some(k);
        self
    }

    pub fn ocp(&self) -> &DiscreteOcp {
        self.solver.ocp()
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.prev.as_ref()
    }

    fn warm_start(&self) -> Option<OcpWarmStart> {
        let prev = self.prev.as_ref()?;
        match self.policy {
            WarmStartPolicy::Cold => None,
            WarmStartPolicy::Reuse => Some(OcpWarmStart::reuse(prev)),
            WarmStartPolicy::Shift | WarmStartPolicy::Auto => Some(self.solver.shifted_warm_start(prev, self.terminal_gain.as_ref())),
        }
    }
}

impl Controller for MpcController {
    fn input_dim(&self) -> usize {
        self.solver.ocp().model_d.m()
    }

    fn act(&mut self, _t: f64, x: &DVector<f64>) -> ControlAction {
        let start = Instant::now();
        let warm = self.warm_start();
        match self.solver.solve(x, warm.as_ref()) {
            Ok(sol) => {
                let (solve_time, iterations) = (sol.stats.wall_time, sol.stats.qp_iterations);
                let event = match sol.status {
                    SolveStatus::Optimal => None,
                    SolveStatus::MaxIter => Some("max-iter".to_string()),
                    SolveStatus::Infeasible => Some("infeasible".to_string()),
                };
                if sol.status != SolveStatus::Infeasible {
                    self.last_u = sol.first_input().clone();
                    self.prev = Some(sol);
                }
                ControlAction {
                    u: self.last_u.clone(),
                    solve_time,
                    iterations,
                    event,
                }
            }
            Err(e) => ControlAction {
                u: self.last_u.clone(),
                solve_time: start.elapsed().as_secs_f64(),
                iterations: 0,
                event: Some(format!("solver-error: {e}")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    Diverged { time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub tick: usize,
    pub time: f64,
    pub solve_time: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityEvent {
    pub time: f64,
    pub event: String,
}

/// Time series of one closed-loop run. `states` has one more entry than
/// `inputs` and `disturbances`: `states[i + 1]` is the RK4 step from
/// `states[i]` under `inputs[i] + disturbances[i]` over `t_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopTrace {
    pub t_p: f64,
    pub t_s: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub samples: Vec<SampleRecord>,
    pub events: Vec<FeasibilityEvent>,
    pub outcome: Outcome,
}

impl ClosedLoopTrace {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trace holds the initial state")
    }

    /// State nearest to time `t` on the plant grid.
    pub fn state_at(&self, t: f64) -> Option<&DVector<f64>> {
        let i = (t / self.t_p).round();
        (i >= 0.0).then(|| self.states.get(i as usize)).flatten()
    }

    pub fn solve_times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.solve_time).collect()
    }

    /// Equality of everything except measured solve times.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.t_p == other.t_p
            && self.times == other.times
            && self.states == other.states
            && self.inputs == other.inputs
            && self.disturbances == other.disturbances
            && self.events == other.events
            && self.outcome == other.outcome
            && self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.tick == b.tick && a.time == b.time && a.iterations == b.iterations)
    }

    /// CSV with header `t,x1..xn,u1..um,d1..dm,solve_ms,event`. The last
    /// row carries the final state with empty input columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states[0].len();
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=m).map(|i| format!("d{i}")));
        header.push("solve_ms".into());
        header.push("event".into());
        writeln!(w, "{}", header.join(","))?;
        let mut samples = self.samples.iter().peekable();
        let mut events = self.events.iter().peekable();
        for (i, x) in self.states.iter().enumerate() {
            let mut row = vec![format!("{}", self.times[i])];
            row.extend(x.iter().map(|v| format!("{v}")));
            if i < self.inputs.len() {
                row.extend(self.inputs[i].iter().map(|v| format!("{v}")));
                row.extend(self.disturbances[i].iter().map(|v| format!("{v}")));
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * m));
            }
            let mut solve = String::new();
            let mut event = String::new();
            if let Some(s) = samples.next_if(|s| s.tick == i) {
                solve = format!("{}", s.solve_time * 1e3);
                if let Some(e) = events.next_if(|e| e.time == s.time) {
                    event = e.event.replace(',', ";");
                }
            }
            row.push(solve);
            row.push(event);
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

struct TraceBuilder {
    trace: ClosedLoopTrace,
}

impl TraceBuilder {
    fn new(x0: &DVector<f64>, t_p: f64, t_s: f64) -> Self {
        Self {
            trace: ClosedLoopTrace {
                t_p,
                t_s,
                times: vec![0.0],
                states: vec![x0.clone()],
                inputs: Vec::new(),
                disturbances: Vec::new(),
                samples: Vec::new(),
                events: Vec::new(),
                outcome: Outcome::Completed,
            },
        }
    }

    fn record_sample(&mut self, tick: usize, time: f64, act: &ControlAction) {
        self.trace.samples.push(SampleRecord {
            tick,
            time,
            solve_time: act.solve_time,
            iterations: act.iterations,
        });
        if let Some(e) = &act.event {
            self.trace.events.push(FeasibilityEvent {
                time,
                event: e.clone(),
            });
        }
    }

    /// Advances the plant one step; returns false once the run has diverged.
    fn advance(
        &mut self,
        plant: &ContinuousModel,
        tick: usize,
        u: &DVector<f64>,
        d: DVector<f64>,
    ) -> bool {
        let t_p = self.trace.t_p;
        let x = self.trace.states.last().expect("non-empty");
        let next = rk4_step(plant, x, &(u + &d), t_p);
        let t_next = (tick + 1) as f64 * t_p;
        match next {
            Ok(v) => {
                let norm = v.norm();
                self.trace.inputs.push(u.clone());
                self.trace.disturbances.push(d);
                self.trace.states.push(v);
                self.trace.times.push(t_next);
                if norm > DIVERGENCE_NORM {
                    self.trace.outcome = Outcome::Diverged { time: t_next };
                    return false;
                }
                true
            }
            Err(_) => {
                self.trace.outcome = Outcome::Diverged { time: t_next };
                false
            }
        }
    }
}

/// Runs `controller` on `plant` from `x0` under `cfg`. Config errors are
/// returned before any simulation; divergence is an [`Outcome`].
pub fn run_with_controller<C: Controller + ?Sized>(
    plant: &ContinuousModel,
    controller: &mut C,
    cfg: &SimConfig,
    x0: &DVector<f64>,
) -> Result<ClosedLoopTrace, SimError> {
    if x0.len() != plant.n() {
        return Err(SimError::Dimension("initial state"));
    }
    if controller.input_dim() != plant.m() {
        return Err(SimError::Dimension("controller input"));
    }
    cfg.disturbance.validate(plant.m()).map_err(SimError::Config)?;
    let t_p = cfg.plant_step();
    let per_sample = cfg.ticks_per_sample();
    let ticks = cfg.total_ticks();
    let m = plant.m();
    let mut b = TraceBuilder::new(x0, t_p, cfg.t_s);
    let mut u = DVector::zeros(m);
    let mut pending: Option<(usize, DVector<f64>)> = None;

    for i in 0..ticks {
        let t = i as f64 * t_p;
        if i % per_sample == 0 {
            let x = b.trace.states.last().expect("non-empty").clone();
            let act = controller.act(t, &x);
            b.record_sample(i, t, &act);
            if cfg.inject_delay {
                let delay = ((act.solve_time / t_p).ceil() as usize).min(per_sample);
                pending = Some((i + delay, act.u));
            } else {
                u = act.u;
            }
        }
        if let Some((at, v)) = pending.take() {
            if i >= at {
                u = v;
            } else {
                pending = Some((at, v));
            }
        }
        let d = cfg.disturbance.at(t, m);
        if !b.advance(plant, i, &u, d) {
            break;
        }
    }
    Ok(b.trace)
}

/// Builds a solver and an [`MpcController`] for `ocp` and runs it, with
/// the warm-start policy taken from `cfg`.
pub fn run_closed_loop(
    plant: &ContinuousModel,
    ocp: &DiscreteOcp,
    cfg: &SimConfig,
    x0: &DVector<f64>,
) -> Result<ClosedLoopTrace, SimError> {
    cfg.validate(ocp.horizon_time())?;
    if !same_time(ocp.t_d(), cfg.t_d) {
        return Err(SimError::Config(format!(
            "OCP step {} differs from configured t_d {}",
            ocp.t_d(),
            cfg.t_d
        )));
    }
    let solver = OcpSolver::new(ocp.clone(), QpSettings::default())?;
    let mut ctrl = MpcController::new(solver, cfg.resolved_warm_start());
    run_with_controller(plant, &mut ctrl, cfg, x0)
}

/// The classical discrete-time MPC loop: one solve per `t_d`, the input
/// held over `t_d / t_p` plant steps. Written as its own loop so that it
/// can be checked against [`run_with_controller`] at `t_s = t_d`.
pub fn run_discrete_time_mpc<C: Controller + ?Sized>(
    plant: &ContinuousModel,
    controller: &mut C,
    t_d: f64,
    t_sim: f64,
    t_p: f64,
    disturbance: &DisturbanceSignal,
    x0: &DVector<f64>,
) -> Result<ClosedLoopTrace, SimError> {
    let per_step = integer_ratio(t_d, t_p)
        .ok_or_else(|| SimError::Config(format!("t_d = {t_d} is not a multiple of t_p = {t_p}")))?;
    if x0.len() != plant.n() || controller.input_dim() != plant.m() {
        return Err(SimError::Dimension("plant/controller"));
    }
    disturbance.validate(plant.m()).map_err(SimError::Config)?;
    let ticks = (t_sim / t_p - 1e-9).ceil().max(0.0) as usize;
    let steps = ticks.div_ceil(per_step);
    let mut b = TraceBuilder::new(x0, t_p, t_d);
    'outer: for k in 0..steps {
        let tick0 = k * per_step;
        let x_k = b.trace.states[tick0].clone();
        let act = controller.act(tick0 as f64 * t_p, &x_k);
        b.record_sample(tick0, tick0 as f64 * t_p, &act);
        for j in 0..per_step {
            let i = tick0 + j;
            if i >= ticks {
                break 'outer;
            }
            let d = disturbance.at(i as f64 * t_p, plant.m());
            if !b.advance(plant, i, &act.u, d) {
                break 'outer;
            }
        }
    }
    Ok(b.trace)
}
