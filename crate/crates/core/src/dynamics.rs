//! Continuous-time models, fixed-step integration and discretization.
//!
//! A [`ContinuousModel`] wraps the right-hand side `ẋ = f(x, u)` and,
//! optionally, its analytic Jacobians. A [`DiscreteModel`] is the
//! prediction model used inside the optimal control problem: either the
//! exact zero-order-hold discretization of an LTI system or a fixed number
//! of RK4 substeps with the input held constant.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type RhsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacobianFn =
    dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("substep count must be at least 1")]
    InvalidSubsteps,
    #[error("integration diverged (non-finite state)")]
    IntegrationDiverged,
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// `ẋ = f(x, u)` with `n` states and `m` inputs.
#[derive(Clone)]
pub struct ContinuousModel {
    name: String,
    n: usize,
    m: usize,
    rhs: Arc<RhsFn>,
    jacobians: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for ContinuousModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic_jacobians", &self.jacobians.is_some())
            .finish()
    }
}

impl ContinuousModel {
    pub fn new<F>(name: impl Into<String>, n: usize, m: usize, rhs: F) -> Self
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            n,
            m,
            rhs: Arc::new(rhs),
            jacobians: None,
        }
    }

    pub fn with_jacobians<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>)
            + Send
            + Sync
            + 'static,
    {
        self.jacobians = Some(Arc::new(jac));
        self
    }

    /// Linear time-invariant model `ẋ = A x + B u`.
    pub fn lti(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert!(a.is_square() && a.nrows() == b.nrows(), "inconsistent LTI shapes");
        let (n, m) = (a.nrows(), b.ncols());
        let (fa, fb) = (a.clone(), b.clone());
        Self::new(name, n, m, move |x, u| &fa * x + &fb * u)
            .with_jacobians(move |_, _| (a.clone(), b.clone()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jacobians.is_some()
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.rhs)(x, u)
    }

    pub fn analytic_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        self.jacobians.as_ref().map(|j| j(x, u))
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), DynamicsError> {
        if x.len() != self.n {
            return Err(DynamicsError::Dimension {
                what: "state",
                expected: self.n,
                got: x.len(),
            });
        }
        if u.len() != self.m {
            return Err(DynamicsError::Dimension {
                what: "input",
                expected: self.m,
                got: u.len(),
            });
        }
        Ok(())
    }
}

/// One classical RK4 step of length `h` with `u` held constant.
pub fn rk4_step(
    model: &ContinuousModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>, DynamicsError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(DynamicsError::InvalidStep(h));
    }
    model.check_dims(x, u)?;
    let k1 = model.eval(x, u);
    let k2 = model.eval(&(x + &k1 * (0.5 * h)), u);
    let k3 = model.eval(&(x + &k2 * (0.5 * h)), u);
    let k4 = model.eval(&(x + &k3 * h), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(DynamicsError::IntegrationDiverged)
    }
}

/// Zero-order-hold discretization via the augmented matrix exponential
/// `exp([[A, B], [0, 0]] t_d) = [[A_d, B_d], [0, I]]`.
pub fn discretize_exact_lti(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t_d: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    if !(t_d > 0.0 && t_d.is_finite()) {
        return Err(DynamicsError::InvalidStep(t_d));
    }
    let (n, m) = (a.nrows(), b.ncols());
    if b.nrows() != n {
        return Err(DynamicsError::Dimension {
            what: "B rows",
            expected: n,
            got: b.nrows(),
        });
    }
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t_d));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * t_d));
    let e = aug.exp();
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Central finite-difference Jacobians of `g(x, u)` with the relative step
/// `1e-6 · (1 + |component|)`.
pub(crate) fn central_difference<G>(
    g: G,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError>
where
    G: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    let n_out = g(x, u)?.len();
    let mut ja = DMatrix::zeros(n_out, x.len());
    let mut jb = DMatrix::zeros(n_out, u.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = FD_REL_STEP * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = g(&xp, u)?;
        xp[i] = x[i] - step;
        let fm = g(&xp, u)?;
        xp[i] = x[i];
        ja.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    let mut up = u.clone();
    for j in 0..u.len() {
        let step = FD_REL_STEP * (1.0 + u[j].abs());
        up[j] = u[j] + step;
        let fp = g(x, &up)?;
        up[j] = u[j] - step;
        let fm = g(x, &up)?;
        up[j] = u[j];
        jb.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    Ok((ja, jb))
}

const FD_REL_STEP: f64 = 1e-6;

/// `(∂f/∂x, ∂f/∂u)` at `(x, u)`: analytic when available, otherwise central
/// finite differences.
pub fn linearize(
    model: &ContinuousModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    model.check_dims(x, u)?;
    if let Some(j) = model.analytic_jacobians(x, u) {
        return Ok(j);
    }
    finite_difference_jacobians(model, x, u)
}

/// Always uses central finite differences, ignoring analytic Jacobians.
pub fn finite_difference_jacobians(
    model: &ContinuousModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    model.check_dims(x, u)?;
    central_difference(|x, u| Ok(model.eval(x, u)), x, u)
}

#[derive(Clone, Debug)]
enum Stepper {
    Lti { a_d: DMatrix<f64>, b_d: DMatrix<f64> },
    Rk4 { model: ContinuousModel, substeps: usize },
}

/// Prediction model `ξ⁺ = f_d(ξ, μ)` at discretization step `t_d`.
#[derive(Clone, Debug)]
pub struct DiscreteModel {
    n: usize,
    m: usize,
    t_d: f64,
    stepper: Stepper,
}

impl DiscreteModel {
    /// Exact ZOH discretization of `ẋ = A x + B u`.
    pub fn exact_lti(a: &DMatrix<f64>, b: &DMatrix<f64>, t_d: f64) -> Result<Self, DynamicsError> {
        let (a_d, b_d) = discretize_exact_lti(a, b, t_d)?;
        Ok(Self::from_matrices(a_d, b_d, t_d))
    }

    /// Wraps already-discretized LTI matrices.
    pub fn from_matrices(a_d: DMatrix<f64>, b_d: DMatrix<f64>, t_d: f64) -> Self {
        Self {
            n: a_d.nrows(),
            m: b_d.ncols(),
            t_d,
            stepper: Stepper::Lti { a_d, b_d },
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t_d(&self) -> f64 {
        self.t_d
    }

    pub fn linear_part(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.stepper {
            Stepper::Lti { a_d, b_d } => Some((a_d, b_d)),
            Stepper::Rk4 { .. } => None,
        }
    }

    /// The continuous model behind an RK4 discretization, if any.
    pub fn continuous(&self) -> Option<&ContinuousModel> {
        match &self.stepper {
            Stepper::Rk4 { model, .. } => Some(model),
            Stepper::Lti { .. } => None,
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        match &self.stepper {
            Stepper::Lti { a_d, b_d } => {
                if x.len() != self.n || u.len() != self.m {
                    return Err(DynamicsError::Dimension {
                        what: "state/input",
                        expected: self.n + self.m,
                        got: x.len() + u.len(),
                    });
                }
                Ok(a_d * x + b_d * u)
            }
            Stepper::Rk4 { model, substeps } => {
                let h = self.t_d / *substeps as f64;
                let mut state = x.clone();
                for _ in 0..*substeps {
                    state = rk4_step(model, &state, u, h)?;
                }
                Ok(state)
            }
        }
    }

    /// Jacobians of `step` itself. Exact for the LTI case, central
    /// differences through the integrator otherwise.
    pub fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        match &self.stepper {
            Stepper::Lti { a_d, b_d } => Ok((a_d.clone(), b_d.clone())),
            Stepper::Rk4 { .. } => central_difference(|x, u| self.step(x, u), x, u),
        }
    }
}

/// `substeps` RK4 steps of length `t_d / substeps` per prediction step.
pub fn discretize_rk4(
    model: &ContinuousModel,
    t_d: f64,
    substeps: usize,
) -> Result<DiscreteModel, DynamicsError> {
    if !(t_d > 0.0 && t_d.is_finite()) {
        return Err(DynamicsError::InvalidStep(t_d));
    }
    if substeps == 0 {
        return Err(DynamicsError::InvalidSubsteps);
    }
    Ok(DiscreteModel {
        n: model.n(),
        m: model.m(),
        t_d,
        stepper: Stepper::Rk4 {
            model: model.clone(),
            substeps,
        },
    })
}
