//! Shipped benchmark systems and the glue that turns one into a discrete
//! OCP at a chosen step `t_d`.

use std::fmt;

use nalgebra::{dmatrix, DMatrix, DVector};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::dynamics::{discretize_rk4, linearize, ContinuousModel, DiscreteModel, DynamicsError};
use crate::ocp::{DiscreteOcp, OcpError, StageCost, StateConstraintNodes};
use crate::sets::{Polyhedron, SetError};
use crate::terminal::{lqr_gain, lqr_terminal_ingredients, solve_care, TerminalError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid parameter {0}: {1}")]
    Parameter(&'static str, f64),
    #[error("horizon {horizon} is not an integer multiple of t_d = {t_d}")]
    Horizon { horizon: f64, t_d: f64 },
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

/// `ẋ₁ = x₂`, `ẋ₂ = u`.
pub fn double_integrator() -> ContinuousModel {
    ContinuousModel::lti("double-integrator", dmatrix![0.0, 1.0; 0.0, 0.0], dmatrix![0.0; 1.0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegratorSpec {
    pub x1_max: f64,
    pub x2_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Diagonal of `Q`.
    pub q: [f64; 2],
    pub r: f64,
    pub horizon: f64,
    pub x0: [f64; 2],
}

impl Default for DoubleIntegratorSpec {
    fn default() -> Self {
        Self {
            x1_max: 2.0,
            x2_max: 0.4,
            u_min: -4.0,
            u_max: 10.0,
            q: [1.0, 0.0],
            r: 0.04,
            horizon: 2.0,
            x0: [2.0, 0.0],
        }
    }
}

impl DoubleIntegratorSpec {
    pub fn benchmark(&self) -> Result<Benchmark, ModelError> {
        // The origin has to be an interior equilibrium.
        for (name, v) in [("x1_max", self.x1_max), ("x2_max", self.x2_max), ("u_max", self.u_max), ("horizon", self.horizon)] {
            if !(v > 0.0) {
                return Err(ModelError::Parameter(name, v));
            }
        }
        if !(self.u_min < 0.0) {
            return Err(ModelError::Parameter("u_min", self.u_min));
        }
        let model = double_integrator();
        let x_set = Polyhedron::from_bounds(&[-self.x1_max, -self.x2_max], &[self.x1_max, self.x2_max])?;
        let u_set = Polyhedron::from_bounds(&[self.u_min], &[self.u_max])?;
        let cost = StageCost::new(DMatrix::from_diagonal(&DVector::from_row_slice(&self.q)), dmatrix![self.r])?;
        Ok(Benchmark {
            model,
            x_set,
            u_set,
            cost,
            horizon: self.horizon,
            x0: DVector::from_row_slice(&self.x0),
            linear: true,
            max_substep: f64::INFINITY,
        })
    }
}

/// An angle in radians that deserializes from a number (radians) or a
/// string with a `deg` or `rad` suffix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Angle(pub f64);

impl Angle {
    pub fn deg(v: f64) -> Self {
        Angle(v.to_radians())
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (num, scale) = if let Some(v) = s.strip_suffix("deg") {
            (v, std::f64::consts::PI / 180.0)
        } else if let Some(v) = s.strip_suffix("rad") {
            (v, 1.0)
        } else {
            (s, 1.0)
        };
        num.trim()
            .parse::<f64>()
            .map(|v| Angle(v * scale))
            .map_err(|_| format!("cannot parse angle {s:?}"))
    }
}

impl Serialize for Angle {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Angle;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an angle in radians or a string like \"7deg\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Angle, E> {
                Ok(Angle(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Angle, E> {
                Ok(Angle(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Angle, E> {
                Ok(Angle(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Angle, E> {
                Angle::parse(v).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Lateral vehicle dynamics with state `[y, ψ, v, ω, δ_f, δ_r]` and input
/// `[δ̇_f, δ̇_r]`. Vehicle parameters default to a nominal sedan with linear
/// tires; they are not taken from any published data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneChangeSpec {
    pub mass: f64,
    pub izz: f64,
    pub lf: f64,
    pub lr: f64,
    pub cf: f64,
    pub cr: f64,
    /// Longitudinal speed (m/s).
    pub speed: f64,
    pub wind_force: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub psi_max: Angle,
    pub delta_f_max: Angle,
    pub delta_r_max: Angle,
    pub u1_max: f64,
    pub u2_max: f64,
    pub q: [f64; 6],
    pub r: [f64; 2],
    pub horizon: f64,
    pub x0: [f64; 6],
    /// Upper bound on the RK4 substep used in the prediction model.
    pub max_substep: f64,
}

impl Default for LaneChangeSpec {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            izz: 2500.0,
            lf: 1.1,
            lr: 1.6,
            cf: 6.0e4,
            cr: 6.0e4,
            speed: 20.0,
            wind_force: 0.0,
            y_min: -0.4,
            y_max: 10.0,
            psi_max: Angle::deg(7.0),
            delta_f_max: Angle::deg(35.0),
            delta_r_max: Angle::deg(4.0),
            u1_max: 1.2,
            u2_max: 0.6,
            q: [1.0; 6],
            r: [1.0; 2],
            horizon: 2.0,
            x0: [5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            max_substep: 0.05,
        }
    }
}

impl LaneChangeSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("mass", self.mass),
            ("izz", self.izz),
            ("speed", self.speed),
            ("cf", self.cf),
            ("cr", self.cr),
            ("max_substep", self.max_substep),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Parameter(name, v));
            }
        }
        if !self.wind_force.is_finite() {
            return Err(ModelError::Parameter("wind_force", self.wind_force));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> Result<Benchmark, ModelError> {
        self.validate()?;
        let inf = f64::INFINITY;
        let (psi, df, dr) = (self.psi_max.0, self.delta_f_max.0, self.delta_r_max.0);
        let x_set = Polyhedron::from_bounds(
            &[self.y_min, -psi, -inf, -inf, -df, -dr],
            &[self.y_max, psi, inf, inf, df, dr],
        )?;
        let u_set = Polyhedron::from_bounds(&[-self.u1_max, -self.u2_max], &[self.u1_max, self.u2_max])?;
        let cost = StageCost::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(&self.q)),
            DMatrix::from_diagonal(&DVector::from_row_slice(&self.r)),
        )?;
        Ok(Benchmark {
            model: lane_change(self)?,
            x_set,
            u_set,
            cost,
            horizon: self.horizon,
            x0: DVector::from_row_slice(&self.x0),
            linear: false,
            max_substep: self.max_substep,
        })
    }
}

/// Lane-change model with linear tire forces `F(α) = C α`.
pub fn lane_change(p: &LaneChangeSpec) -> Result<ContinuousModel, ModelError> {
    p.validate()?;
    let LaneChangeSpec {
        mass,
        izz,
        lf,
        lr,
        cf,
        cr,
        speed: s,
        wind_force: fw,
        ..
    } = *p;
    let rhs = move |x: &DVector<f64>, u: &DVector<f64>| {
        let (psi, v, w, df, dr) = (x[1], x[2], x[3], x[4], x[5]);
        let af = df - (v + lf * w) / s;
        let ar = dr - (v - lr * w) / s;
        let ff = cf * af * df.cos();
        let fr = cr * ar * dr.cos();
        DVector::from_vec(vec![
            s * psi.sin() + v * psi.cos(),
            w,
            -s * w + (ff + fr + fw) / mass,
            (ff * lf - fr * lr) / izz,
            u[0],
            u[1],
        ])
    };
    let jac = move |x: &DVector<f64>, _u: &DVector<f64>| {
        let (psi, v, w, df, dr) = (x[1], x[2], x[3], x[4], x[5]);
        let af = df - (v + lf * w) / s;
        let ar = dr - (v - lr * w) / s;
        let (cdf, sdf, cdr, sdr) = (df.cos(), df.sin(), dr.cos(), dr.sin());
        // Partials of the axle forces ff = cf αf cos δf, fr = cr αr cos δr.
        let ff_v = -cf * cdf / s;
        let ff_w = -cf * cdf * lf / s;
        let ff_df = cf * (cdf - af * sdf);
        let fr_v = -cr * cdr / s;
        let fr_w = cr * cdr * lr / s;
        let fr_dr = cr * (cdr - ar * sdr);
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 1)] = s * psi.cos() - v * psi.sin();
        a[(0, 2)] = psi.cos();
        a[(1, 3)] = 1.0;
        a[(2, 2)] = (ff_v + fr_v) / mass;
        a[(2, 3)] = -s + (ff_w + fr_w) / mass;
        a[(2, 4)] = ff_df / mass;
        a[(2, 5)] = fr_dr / mass;
        a[(3, 2)] = (ff_v * lf - fr_v * lr) / izz;
        a[(3, 3)] = (ff_w * lf - fr_w * lr) / izz;
        a[(3, 4)] = ff_df * lf / izz;
        a[(3, 5)] = -fr_dr * lr / izz;
        let mut b = DMatrix::zeros(6, 2);
        b[(4, 0)] = 1.0;
        b[(5, 1)] = 1.0;
        (a, b)
    };
    Ok(ContinuousModel::new("lane-change", 6, 2, rhs).with_jacobians(jac))
}

/// Terminal ingredients attached to the discrete OCP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalChoice {
    /// Terminal cost `P` only.
    #[default]
    CostOnly,
    /// Terminal cost and the output admissible set of the LQR loop.
    CostAndSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpOptions {
    pub terminal: TerminalChoice,
    pub state_nodes: StateConstraintNodes,
    /// Step at which the terminal set is computed.
    pub terminal_set_step: f64,
    pub terminal_set_max_iter: usize,
}

impl Default for OcpOptions {
    fn default() -> Self {
        Self {
            terminal: TerminalChoice::CostOnly,
            state_nodes: StateConstraintNodes::ThroughTerminal,
            terminal_set_step: 0.02,
            terminal_set_max_iter: 500,
        }
    }
}

/// A plant together with its constraint sets, stage cost, horizon and
/// initial state.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub model: ContinuousModel,
    pub x_set: Polyhedron,
    pub u_set: Polyhedron,
    pub cost: StageCost,
    /// Prediction horizon `T` (s).
    pub horizon: f64,
    pub x0: DVector<f64>,
    /// Whether the prediction model is the exact ZOH discretization.
    pub linear: bool,
    /// Largest RK4 substep of a nonlinear prediction model.
    pub max_substep: f64,
}

impl Benchmark {
    /// `N = T / t_d`, rejecting non-integer ratios.
    pub fn steps(&self, t_d: f64) -> Result<usize, ModelError> {
        steps_for(self.horizon, t_d)
    }

    /// Linearization at the origin.
    pub fn linearization(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.model.n(), self.model.m());
        linearize(&self.model, &DVector::zeros(n), &DVector::zeros(m)).expect("model dimensions are consistent")
    }

    /// CARE solution and LQR gain of the linearization.
    pub fn lqr(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let (a, b) = self.linearization();
        let p = solve_care(&a, &b, &self.cost.q, &self.cost.r)?;
        let k = lqr_gain(&p, &b, &self.cost.r)?;
        Ok((p, k))
    }

    pub fn prediction_model(&self, t_d: f64) -> Result<DiscreteModel, ModelError> {
        if self.linear {
            let (a, b) = self.linearization();
            Ok(DiscreteModel::exact_lti(&a, &b, t_d)?)
        } else {
            let substeps = ((t_d / self.max_substep) - 1e-9).ceil().max(1.0) as usize;
            Ok(discretize_rk4(&self.model, t_d, substeps)?)
        }
    }

    pub fn ocp(&self, t_d: f64, opts: &OcpOptions) -> Result<DiscreteOcp, ModelError> {
        let horizon = self.steps(t_d)?;
        let model_d = self.prediction_model(t_d)?;
        let (a, b) = self.linearization();
        let (p, omega) = match opts.terminal {
            TerminalChoice::CostOnly => (solve_care(&a, &b, &self.cost.q, &self.cost.r)?, None),
            TerminalChoice::CostAndSet => {
                let ti = lqr_terminal_ingredients(
                    &a,
                    &b,
                    &self.cost,
                    &self.x_set,
                    &self.u_set,
                    opts.terminal_set_step,
                    opts.terminal_set_max_iter,
                )?;
                (ti.p, Some(ti.omega))
            }
        };
        let mut ocp = DiscreteOcp::new(
            model_d,
            self.cost.clone(),
            p,
            horizon,
            self.x_set.clone(),
            self.u_set.clone(),
        )?
        .with_state_nodes(opts.state_nodes);
        if let Some(o) = omega {
            ocp = ocp.with_terminal_set(o)?;
        }
        Ok(ocp)
    }
}

/// `N = T / t_d` when the ratio is a positive integer (to 1e-9 relative).
pub fn steps_for(horizon: f64, t_d: f64) -> Result<usize, ModelError> {
    let err = ModelError::Horizon { horizon, t_d };
    if !(t_d > 0.0 && horizon > 0.0 && t_d.is_finite() && horizon.is_finite()) {
        return Err(err);
    }
    let ratio = horizon / t_d;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(err);
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::finite_difference_jacobians;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn double_integrator_rhs() {
        let f = double_integrator();
        assert_eq!(f.eval(&dvector![0.0, 1.0], &dvector![0.0]), dvector![1.0, 0.0]);
        assert_eq!(f.eval(&dvector![2.0, 0.0], &dvector![-4.0]), dvector![0.0, -4.0]);
        assert_eq!(f.eval(&dvector![0.0, 0.0], &dvector![0.0]), dvector![0.0, 0.0]);
        assert!(f.has_analytic_jacobians());
    }

    #[test]
    fn double_integrator_constants() {
        let b = DoubleIntegratorSpec::default().benchmark().unwrap();
        assert!(b.x_set.contains(&dvector![2.0, 0.4], 0.0));
        assert!(!b.x_set.contains(&dvector![2.0, 0.41], 1e-12));
        assert!(b.u_set.contains(&dvector![10.0], 0.0) && b.u_set.contains(&dvector![-4.0], 0.0));
        assert!(!b.u_set.contains(&dvector![-4.01], 1e-12));
        assert_eq!(b.cost.q, DMatrix::from_diagonal(&dvector![1.0, 0.0]));
        assert_eq!(b.cost.r, dmatrix![0.04]);
        assert_eq!(b.steps(0.4).unwrap(), 5);
        assert_eq!(b.steps(0.02).unwrap(), 100);
        assert!(b.steps(0.3).is_err());
    }

    #[test]
    fn lane_change_equilibrium_and_kinematics() {
        let f = lane_change(&LaneChangeSpec::default()).unwrap();
        assert_eq!(f.eval(&DVector::zeros(6), &DVector::zeros(2)).amax(), 0.0);
        let x = dvector![1.0, 0.05, -0.3, 0.2, 0.1, -0.02];
        let u = dvector![0.7, -0.4];
        let dx = f.eval(&x, &u);
        assert_eq!(dx[1], x[3]);
        assert_eq!(dx[4], u[0]);
        assert_eq!(dx[5], u[1]);
    }

    #[test]
    fn lane_change_bounds_in_radians() {
        let b = LaneChangeSpec::default().benchmark().unwrap();
        let deg = std::f64::consts::PI / 180.0;
        let edge = dvector![10.0, 7.0 * deg, 0.0, 0.0, 35.0 * deg, 4.0 * deg];
        assert!(b.x_set.contains(&edge, 1e-12));
        assert!(!b.x_set.contains(&dvector![-0.41, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-12));
        assert!(b.u_set.contains(&dvector![1.2, -0.6], 0.0));
        assert!(!b.u_set.contains(&dvector![1.21, 0.0], 1e-12));
    }

    #[test]
    fn angle_parsing() {
        let a: Angle = serde_json::from_str("\"7deg\"").unwrap();
        assert!((a.0 - 7f64.to_radians()).abs() < 1e-15);
        let a: Angle = serde_json::from_str("0.1").unwrap();
        assert_eq!(a.0, 0.1);
        let a: Angle = serde_json::from_str("\"0.25 rad\"").unwrap();
        assert_eq!(a.0, 0.25);
        assert!(serde_json::from_str::<Angle>("\"seven\"").is_err());
        let spec: LaneChangeSpec = serde_json::from_str(r#"{"psi_max": "10deg"}"#).unwrap();
        assert!((spec.psi_max.0 - 10f64.to_radians()).abs() < 1e-15);
        assert_eq!(spec.mass, 1500.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let spec = LaneChangeSpec {
            mass: 0.0,
            ..LaneChangeSpec::default()
        };
        assert!(matches!(lane_change(&spec), Err(ModelError::Parameter("mass", _))));
    }

    #[test]
    fn small_angle_consistency() {
        let f = lane_change(&LaneChangeSpec::default()).unwrap();
        for deg in [-2.0f64, -1.0, 0.5, 2.0] {
            let psi = deg.to_radians();
            let x = dvector![0.0, psi, 0.3, 0.0, 0.0, 0.0];
            let y_dot = f.eval(&x, &DVector::zeros(2))[0];
            let approx = 20.0 * psi + 0.3;
            assert!((y_dot - approx).abs() <= 0.01 * approx.abs());
        }
    }

    #[test]
    fn terminal_cost_for_lane_change() {
        let b = LaneChangeSpec::default().benchmark().unwrap();
        let (p, _) = b.lqr().unwrap();
        assert!(p.symmetric_eigenvalues().min() > 0.0);
        let ocp = b.ocp(0.2, &OcpOptions::default()).unwrap();
        assert_eq!(ocp.horizon, 10);
        assert!(ocp.model_d.linear_part().is_none());
    }

    proptest! {
        #[test]
        fn lane_change_jacobians_match_fd(
            x in prop::collection::vec(-0.5f64..0.5, 6),
            u in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let f = lane_change(&LaneChangeSpec::default()).unwrap();
            let (x, u) = (DVector::from_vec(x), DVector::from_vec(u));
            let (a, b) = f.analytic_jacobians(&x, &u).unwrap();
            let (fa, fb) = finite_difference_jacobians(&f, &x, &u).unwrap();
            let scale = a.amax().max(1.0);
            prop_assert!((&a - fa).amax() <= 1e-5 * scale);
            prop_assert!((&b - fb).amax() <= 1e-5 * scale);
        }
    }
}
