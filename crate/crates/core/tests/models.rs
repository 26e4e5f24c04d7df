use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;

use hmpc::dynamics::{discretize_rk4, finite_difference_jacobians, rk4_step};
use hmpc::models::{double_integrator, lane_change, steps_for, DoubleIntegratorSpec, LaneChangeSpec, OcpOptions};

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[test]
fn lane_change_substeps_agree_with_fine_reference() {
    let model = lane_change(&LaneChangeSpec::default()).unwrap();
    let x0 = dvector![5.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for u in [dvector![0.0, 0.0], dvector![-1.2, 0.6], dvector![0.8, -0.3]] {
        let reference = discretize_rk4(&model, 0.2, 64).unwrap().step(&x0, &u).unwrap();
        let coarse = discretize_rk4(&model, 0.2, 4).unwrap().step(&x0, &u).unwrap();
        assert!(rel(&coarse, &reference) <= 1e-4, "u = {u}: {}", rel(&coarse, &reference));
    }
    let one = discretize_rk4(&model, 0.2, 1).unwrap().step(&x0, &dvector![0.3, 0.1]).unwrap();
    assert_eq!(one, rk4_step(&model, &x0, &dvector![0.3, 0.1], 0.2).unwrap());
}

#[test]
fn double_integrator_at_initial_state() {
    let f = double_integrator().eval(&dvector![2.0, 0.0], &dvector![-4.0]);
    assert_eq!(f, dvector![0.0, -4.0]);
}

#[test]
fn benchmark_horizons() {
    let di = DoubleIntegratorSpec::default().benchmark().unwrap();
    assert_eq!(di.steps(0.02).unwrap(), 100);
    assert_eq!(di.steps(0.4).unwrap(), 5);
    assert!(di.steps(0.3).is_err());
    let lc = LaneChangeSpec::default().benchmark().unwrap();
    assert_eq!(lc.steps(0.04).unwrap(), 50);
    assert_eq!(lc.steps(0.2).unwrap(), 10);
    assert!(steps_for(2.0, 0.0).is_err());
    assert!(steps_for(2.0, 4.0).is_err());
}

#[test]
fn lane_change_prediction_model_uses_substeps() {
    let lc = LaneChangeSpec::default().benchmark().unwrap();
    let ocp = lc.ocp(0.2, &OcpOptions::default()).unwrap();
    assert!(ocp.model_d.linear_part().is_none());
    let x0 = &lc.x0;
    let u = dvector![0.4, -0.1];
    let expected = discretize_rk4(&lc.model, 0.2, 4).unwrap().step(x0, &u).unwrap();
    assert_eq!(ocp.model_d.step(x0, &u).unwrap(), expected);
}

fn near(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> bool {
    (a - b).amax() <= rel_tol * b.amax().max(1.0)
}

proptest! {
    #[test]
    fn lane_change_jacobians_match_finite_differences(
        psi in -0.12f64..0.12,
        v in -1.0f64..1.0,
        w in -0.5f64..0.5,
        df in -0.6f64..0.6,
        dr in -0.07f64..0.07,
    ) {
        let model = lane_change(&LaneChangeSpec::default()).unwrap();
        let x = dvector![0.3, psi, v, w, df, dr];
        let u = dvector![0.1, -0.2];
        let (a, b) = model.analytic_jacobians(&x, &u).unwrap();
        let (fa, fb) = finite_difference_jacobians(&model, &x, &u).unwrap();
        prop_assert!(near(&a, &fa, 1e-5));
        prop_assert!(near(&b, &fb, 1e-5));
    }
}
