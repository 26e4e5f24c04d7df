//! Discretized optimal control problems.
//!
//! ```text
//! min  ξ_Nᵀ P ξ_N + Σ_{j<N} t_d·l(ξ_j, μ_j)
//! s.t. ξ_0 = x,  ξ_{j+1} = f_d(ξ_j, μ_j),  μ_j ∈ 𝒰,  ξ_i ∈ 𝒳,  [ξ_N ∈ Ω]
//! ```
//!
//! Linear instances are condensed into a dense QP in the input sequence
//! ([`LinearOcpSolver`]); nonlinear ones go through a trust-region SQP
//! ([`SqpSolver`]).

mod linear;
mod sqp;

pub use linear::{condense, solve_linear_ocp, LinearOcpSolver};
pub use sqp::{solve_nonlinear_ocp, SqpSettings, SqpSolver};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DiscreteModel, DynamicsError};
use crate::qp::{QpError, QpSettings};
use crate::sets::{Polyhedron, SetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("OCP has no linear prediction model")]
    NotLinear,
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error("{0} must contain the origin")]
    OriginNotAdmissible(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("Q must be positive semidefinite and R positive definite")]
    InvalidCost,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Set(#[from] SetError),
}

/// `l(x, u) = xᵀ Q x + uᵀ R u`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, OcpError> {
        if !q.is_square() || !r.is_square() {
            return Err(OcpError::Dimension("stage cost"));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !sym(&q) || !sym(&r) {
            return Err(OcpError::InvalidCost);
        }
        if q.nrows() > 0 && q.clone().symmetric_eigenvalues().min() < -1e-12 {
            return Err(OcpError::InvalidCost);
        }
        if r.clone().cholesky().is_none() {
            return Err(OcpError::InvalidCost);
        }
        Ok(Self { q, r })
    }

    pub fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    /// `(Q_d, R_d) = (t_d Q, t_d R)`.
    pub fn discrete(&self, t_d: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        (&self.q * t_d, &self.r * t_d)
    }
}

/// Which prediction nodes carry the state constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateConstraintNodes {
    /// `ξ_i ∈ 𝒳` for `i = 1..N`.
    #[default]
    ThroughTerminal,
    /// `ξ_i ∈ 𝒳` for `i = 1..N−1` (the terminal node is left to Ω).
    BeforeTerminal,
}

#[derive(Clone, Debug)]
pub struct DiscreteOcp {
    pub model_d: DiscreteModel,
    pub cost: StageCost,
    /// Terminal weight `P`.
    pub terminal_cost: DMatrix<f64>,
    pub horizon: usize,
    pub x_set: Polyhedron,
    pub u_set: Polyhedron,
    pub terminal_set: Option<Polyhedron>,
    pub state_nodes: StateConstraintNodes,
}

impl DiscreteOcp {
    pub fn new(
        model_d: DiscreteModel,
        cost: StageCost,
        terminal_cost: DMatrix<f64>,
        horizon: usize,
        x_set: Polyhedron,
        u_set: Polyhedron,
    ) -> Result<Self, OcpError> {
        let ocp = Self {
            model_d,
            cost,
            terminal_cost,
            horizon,
            x_set,
            u_set,
            terminal_set: None,
            state_nodes: StateConstraintNodes::default(),
        };
        ocp.validate()?;
        Ok(ocp)
    }

    pub fn with_terminal_set(mut self, omega: Polyhedron) -> Result<Self, OcpError> {
        self.terminal_set = Some(omega);
        self.validate()?;
        Ok(self)
    }

    pub fn with_state_nodes(mut self, nodes: StateConstraintNodes) -> Self {
        self.state_nodes = nodes;
        self
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let (n, m) = (self.model_d.n(), self.model_d.m());
        if self.horizon == 0 {
            return Err(OcpError::EmptyHorizon);
        }
        if self.cost.q.nrows() != n || self.cost.r.nrows() != m {
            return Err(OcpError::Dimension("stage cost"));
        }
        if self.terminal_cost.shape() != (n, n) {
            return Err(OcpError::Dimension("terminal cost"));
        }
        if self.x_set.dim() != n || self.u_set.dim() != m {
            return Err(OcpError::Dimension("constraint sets"));
        }
        let origin_tol = 1e-12;
        if !self.x_set.contains(&DVector::zeros(n), origin_tol) {
            return Err(OcpError::OriginNotAdmissible("state set"));
        }
        if !self.u_set.contains(&DVector::zeros(m), origin_tol) {
            return Err(OcpError::OriginNotAdmissible("input set"));
        }
        if let Some(omega) = &self.terminal_set {
            if omega.dim() != n {
                return Err(OcpError::Dimension("terminal set"));
            }
            if !omega.contains(&DVector::zeros(n), origin_tol) {
                return Err(OcpError::OriginNotAdmissible("terminal set"));
            }
        }
        Ok(())
    }

    pub fn t_d(&self) -> f64 {
        self.model_d.t_d()
    }

    /// Prediction horizon `T = N t_d`.
    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.t_d()
    }

    /// Whether node `i` (1-based) carries the state constraint.
    pub fn constrains_node(&self, i: usize) -> bool {
        match self.state_nodes {
            StateConstraintNodes::ThroughTerminal => (1..=self.horizon).contains(&i),
            StateConstraintNodes::BeforeTerminal => (1..self.horizon).contains(&i),
        }
    }

    pub fn rollout(&self, x: &DVector<f64>, mu: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, OcpError> {
        if mu.len() != self.horizon {
            return Err(OcpError::Dimension("input sequence length"));
        }
        let mut xi = Vec::with_capacity(self.horizon + 1);
        xi.push(x.clone());
        for u in mu {
            let next = self.model_d.step(xi.last().expect("non-empty"), u)?;
            xi.push(next);
        }
        Ok(xi)
    }

    /// Objective of a state/input trajectory.
    pub fn objective(&self, xi: &[DVector<f64>], mu: &[DVector<f64>]) -> f64 {
        let t_d = self.t_d();
        let running: f64 = mu
            .iter()
            .zip(xi)
            .map(|(u, x)| t_d * self.cost.stage(x, u))
            .sum();
        let last = &xi[self.horizon];
        running + last.dot(&(&self.terminal_cost * last))
    }

    /// Largest violation of 𝒰, 𝒳 (on constrained nodes) and Ω.
    pub fn max_violation(&self, xi: &[DVector<f64>], mu: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for u in mu {
            worst = worst.max(self.u_set.max_violation(u));
        }
        for (i, x) in xi.iter().enumerate() {
            if self.constrains_node(i) {
                worst = worst.max(self.x_set.max_violation(x));
            }
        }
        if let Some(omega) = &self.terminal_set {
            worst = worst.max(omega.max_violation(&xi[self.horizon]));
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SolveStats {
    /// Outer iterations (1 for the condensed linear path, SQP iterations
    /// otherwise).
    pub iterations: usize,
    /// Total Newton iterations spent inside the QP solver.
    pub qp_iterations: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub mu: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub value: f64,
    pub stats: SolveStats,
    pub status: SolveStatus,
    pub(crate) qp_duals: Option<DVector<f64>>,
}

impl OcpSolution {
    /// `μ*_0`.
    pub fn first_input(&self) -> &DVector<f64> {
        &self.mu[0]
    }

    pub fn stacked_inputs(&self) -> DVector<f64> {
        stack(&self.mu)
    }
}

pub(crate) fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let len = vs.iter().map(DVector::len).sum();
    DVector::from_iterator(len, vs.iter().flat_map(|v| v.iter().copied()))
}

pub(crate) fn unstack(z: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    z.as_slice()
        .chunks(m)
        .map(DVector::from_column_slice)
        .collect()
}

/// Initial guess for a solve.
#[derive(Clone, Debug)]
pub struct OcpWarmStart {
    pub mu: Vec<DVector<f64>>,
    /// QP multipliers in the solver's row layout, when they still apply.
    pub duals: Option<DVector<f64>>,
}

impl OcpWarmStart {
    /// Reuses a previous solution unchanged, duals included.
    pub fn reuse(prev: &OcpSolution) -> Self {
        Self {
            mu: prev.mu.clone(),
            duals: prev.qp_duals.clone(),
        }
    }
}

/// Shifts the input sequence by one stage. The freed last stage repeats the
/// previous last input, or applies `−K ξ_N` when a terminal gain is given.
pub fn shift_warm_start(prev: &OcpSolution, terminal_gain: Option<&DMatrix<f64>>) -> OcpWarmStart {
    let mut mu: Vec<DVector<f64>> = prev.mu.iter().skip(1).cloned().collect();
    let last = match terminal_gain {
        Some(k) => -(k * prev.xi.last().expect("non-empty trajectory")),
        None => prev.mu.last().expect("non-empty horizon").clone(),
    };
    mu.push(last);
    OcpWarmStart { mu, duals: None }
}

/// Either solver behind one interface; picks the condensed QP when the
/// prediction model is linear.
#[derive(Clone, Debug)]
pub enum OcpSolver {
    Linear(LinearOcpSolver),
    Nonlinear(SqpSolver),
}

impl OcpSolver {
    pub fn new(ocp: DiscreteOcp, qp: QpSettings) -> Result<Self, OcpError> {
        if ocp.model_d.linear_part().is_some() {
            Ok(Self::Linear(LinearOcpSolver::new(ocp, qp)?))
        } else {
            let settings = SqpSettings {
                qp,
                ..SqpSettings::default()
            };
            Ok(Self::Nonlinear(SqpSolver::new(ocp, settings)?))
        }
    }

    pub fn ocp(&self) -> &DiscreteOcp {
        match self {
            Self::Linear(s) => s.ocp(),
            Self::Nonlinear(s) => s.ocp(),
        }
    }

    pub fn solve(&self, x: &DVector<f64>, warm: Option<&OcpWarmStart>) -> Result<OcpSolution, OcpError> {
        match self {
            Self::Linear(s) => s.solve(x, warm),
            Self::Nonlinear(s) => s.solve(x, warm),
        }
    }

    /// Shifted warm start; the condensed path also shifts its multipliers.
    pub fn shifted_warm_start(&self, prev: &OcpSolution, terminal_gain: Option<&DMatrix<f64>>) -> OcpWarmStart {
        match self {
            Self::Linear(s) => s.shifted_warm_start(prev, terminal_gain),
            Self::Nonlinear(_) => shift_warm_start(prev, terminal_gain),
        }
    }
}
