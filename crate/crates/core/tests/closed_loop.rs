mod common;

use nalgebra::{dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hmpc::models::{DoubleIntegratorSpec, LaneChangeSpec};
use hmpc::simulator::{
    estimate_l, measure_iss, run_discrete_time_mpc, run_with_controller, ClosedLoopTrace, Controller, DisturbanceSignal,
    LinearFeedback, Outcome, Scheme, SimConfig, SimError, TraceSummary,
};

use common::{controller, double_integrator, solver};

fn run(t_s: f64, t_d: f64, t_sim: f64, d: DisturbanceSignal) -> ClosedLoopTrace {
    let bench = double_integrator();
    let cfg = SimConfig::new(t_s, t_d, t_sim).with_disturbance(d);
    let mut ctrl = controller(&bench, &cfg);
    run_with_controller(&bench.model, &mut ctrl, &cfg, &bench.x0).unwrap()
}

#[test]
fn replay_is_bit_identical() {
    let d = DisturbanceSignal::piecewise(11, 0.5, 0.5);
    let a = run(0.02, 0.4, 6.0, d.clone());
    let b = run(0.02, 0.4, 6.0, d);
    assert!(a.same_trajectory(&b));
    let other = run(0.02, 0.4, 6.0, DisturbanceSignal::piecewise(12, 0.5, 0.5));
    assert!(!a.same_trajectory(&other));
}

#[test]
fn input_is_held_between_samples() {
    let tr = run(0.1, 0.4, 4.0, DisturbanceSignal::Zero);
    let per = (0.1 / tr.t_p).round() as usize;
    for (i, u) in tr.inputs.iter().enumerate() {
        assert_eq!(u, &tr.inputs[i - i % per], "tick {i}");
    }
    assert!(tr.samples.iter().all(|s| s.tick % per == 0));
}

#[test]
fn refining_plant_step_converges_at_fourth_order() {
    let spec = LaneChangeSpec::default();
    let bench = spec.benchmark().unwrap();
    let (_, k) = bench.lqr().unwrap();
    let x0 = dvector![0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
    let at = |t_p: f64| {
        let cfg = SimConfig::new(0.04, 0.04, 2.0).with_plant_step(t_p);
        let mut ctrl = LinearFeedback { gain: k.clone() };
        let tr = run_with_controller(&bench.model, &mut ctrl, &cfg, &x0).unwrap();
        tr.state_at(2.0).unwrap().clone()
    };
    let (x1, x2, x3) = (at(0.04), at(0.02), at(0.01));
    let ratio = (&x1 - &x2).norm() / (&x2 - &x3).norm();
    assert!((12.0..=20.0).contains(&ratio), "deviation ratio {ratio}");
}

#[test]
fn equal_rates_match_discrete_time_loop() {
    let bench = double_integrator();
    let d = DisturbanceSignal::piecewise(5, 0.5, 0.3);
    let cfg = SimConfig::new(0.4, 0.4, 8.0).with_disturbance(d.clone()).with_scheme(Scheme::Mpc2);
    let mut c1 = controller(&bench, &cfg);
    let a = run_with_controller(&bench.model, &mut c1, &cfg, &bench.x0).unwrap();
    let mut c2 = controller(&bench, &cfg);
    let b = run_discrete_time_mpc(&bench.model, &mut c2, 0.4, 8.0, cfg.plant_step(), &d, &bench.x0).unwrap();
    assert!(a.same_trajectory(&b));
}

#[test]
fn fast_scheme_respects_state_constraints_nominally() {
    let bench = double_integrator();
    let tr = run(0.02, 0.02, 10.0, DisturbanceSignal::Zero);
    let s = TraceSummary::new(&tr, 10.0, &bench.x_set, &bench.u_set);
    assert!(s.converged(1e-2));
    assert!(s.max_state_violation <= 1e-6, "violation {}", s.max_state_violation);
    assert!(s.max_input_violation <= 1e-6);
    assert_eq!(s.feasibility_events, 0);
}

#[test]
fn hypersampling_rejects_disturbance_better_than_slow_sampling() {
    let x2_max = DoubleIntegratorSpec::default().x2_max;
    let overshoot = |tr: &ClosedLoopTrace| tr.states.iter().map(|x| (x[1].abs() - x2_max).max(0.0)).fold(0.0, f64::max);
    let d = DisturbanceSignal::piecewise(0, 0.5, 0.5);
    let hmpc = run(0.02, 0.4, 20.0, d.clone());
    let mpc2 = run(0.4, 0.4, 20.0, d);
    for tr in [&hmpc, &mpc2] {
        assert_eq!(tr.outcome, Outcome::Completed);
        assert!(tr.final_state().norm() < 1.0);
    }
    assert!(overshoot(&hmpc) <= overshoot(&mpc2));
}

fn random_states(count: usize, scale: f64, seed: u64) -> Vec<DVector<f64>> {
    let spec = DoubleIntegratorSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            dvector![
                scale * rng.gen_range(-spec.x1_max..spec.x1_max),
                scale * rng.gen_range(-spec.x2_max..spec.x2_max)
            ]
        })
        .collect()
}

#[test]
fn discretization_error_vanishes_at_reference() {
    let bench = double_integrator();
    let curve = estimate_l(|t| Ok(solver(&bench, t)), &random_states(10, 1.0, 1), &[0.05], 0.05).unwrap();
    assert_eq!(curve, vec![(0.05, 0.0)]);
    let tiny = vec![DVector::zeros(2), dvector![1e-10, 0.0]];
    let curve = estimate_l(|t| Ok(solver(&bench, t)), &tiny, &[0.4], 0.05).unwrap();
    assert_eq!(curve, vec![(0.4, 0.0)]);
    assert!(estimate_l(|t| Ok(solver(&bench, t)), &tiny, &[0.02], 0.05).is_err());
}

#[test]
fn discretization_error_is_homogeneous_near_origin() {
    let bench = double_integrator();
    let small = random_states(30, 0.02, 2);
    let half: Vec<DVector<f64>> = small.iter().map(|x| x * 0.5).collect();
    let grid = [0.4, 0.1];
    let a = estimate_l(|t| Ok(solver(&bench, t)), &small, &grid, 0.02).unwrap();
    let b = estimate_l(|t| Ok(solver(&bench, t)), &half, &grid, 0.02).unwrap();
    for ((_, la), (_, lb)) in a.iter().zip(&b) {
        assert!(*la > 0.0);
        assert!((la - lb).abs() <= 0.1 * la, "{la} vs {lb}");
    }
}

fn hmpc_iss(bounds: &[f64]) -> hmpc::simulator::IssReport {
    let bench = double_integrator();
    let cfg = SimConfig::new(0.02, 0.4, 20.0);
    let make = || -> Result<Box<dyn Controller>, SimError> { Ok(Box::new(controller(&bench, &cfg))) };
    measure_iss(&bench.model, make, &cfg, &bench.x0, bounds, &[0, 1, 2]).unwrap()
}

#[test]
fn iss_gain_is_linearly_bounded() {
    let report = hmpc_iss(&[0.01, 0.02, 0.05, 0.1, 0.2]);
    for w in report.pairs.windows(2) {
        assert!(w[0].1 <= w[1].1 + 1e-3);
    }
    let gain = report.gain_bound();
    assert!(gain.is_finite() && gain > 0.0 && gain < 10.0, "gain {gain}");
    let decay = report.decay.unwrap();
    assert!(decay.rate > 0.0);
}

#[test]
fn iss_requires_a_long_enough_tail() {
    let bench = double_integrator();
    let cfg = SimConfig::new(0.02, 0.4, 8.0);
    let make = || -> Result<Box<dyn Controller>, SimError> { Ok(Box::new(controller(&bench, &cfg))) };
    assert!(matches!(
        measure_iss(&bench.model, make, &cfg, &bench.x0, &[0.1], &[0]),
        Err(SimError::Config(_))
    ));
}

#[test]
fn small_gain_condition_predicts_convergence() {
    let bench = double_integrator();
    let gain = hmpc_iss(&[0.05, 0.1, 0.2]).gain_bound();
    let grid = [0.4, 0.2, 0.1, 0.05];
    let curve = estimate_l(|t| Ok(solver(&bench, t)), &random_states(30, 1.0, 3), &grid, 0.01).unwrap();
    let mut checked = 0;
    for (t_d, l) in curve {
        if l * gain < 1.0 {
            checked += 1;
            let tr = run(0.02, t_d, 10.0, DisturbanceSignal::Zero);
            let s = TraceSummary::new(&tr, 10.0, &bench.x_set, &bench.u_set);
            assert!(s.converged(1e-2), "t_d = {t_d}: final norm {}", s.final_norm);
        }
    }
    assert!(checked > 0, "no grid point satisfies the small-gain condition");
}

#[test]
fn csv_export_has_one_row_per_tick() {
    let tr = run(0.02, 0.4, 1.0, DisturbanceSignal::piecewise(0, 0.5, 0.5));
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,d1,solve_ms,event");
    assert_eq!(lines.count(), tr.states.len());
}
