//! Trust-region SQP for nonlinear prediction models.
//!
//! Each iteration linearizes the discrete step along the current rollout,
//! condenses the linearization into a QP in the input correction `Δμ`, and
//! accepts or rejects the step by the ratio of actual to predicted decrease
//! of the exact penalty merit
//!
//! ```text
//! φ(μ) = J(μ) + β Σ_i max(0, max_r (H ξ_i − h)_r).
//! ```
//!
//! State and terminal rows enter the QP with one elastic slack per node, so
//! the subproblem is always feasible.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{DiscreteOcp, OcpError, OcpSolution, OcpWarmStart, SolveStats, SolveStatus};
use crate::qp::{solve_qp, QpSettings, QpStatus, QuadProg, WarmStart};
use crate::sets::Polyhedron;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqpSettings {
    pub qp: QpSettings,
    pub max_iter: usize,
    /// Stop once `‖Δμ‖_∞` falls below this.
    pub step_tol: f64,
    pub kkt_tol: f64,
    pub trust_radius: f64,
    pub penalty_init: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            qp: QpSettings::default(),
            max_iter: 50,
            step_tol: 1e-6,
            kkt_tol: 1e-5,
            trust_radius: 0.5,
            penalty_init: 100.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SqpSolver {
    ocp: DiscreteOcp,
    settings: SqpSettings,
    /// Nodes (1-based) carrying state or terminal rows; one slack each.
    slack_nodes: Vec<usize>,
}

struct NodeRows<'a> {
    sets: Vec<&'a Polyhedron>,
}

impl NodeRows<'_> {
    fn h_mat(&self) -> DMatrix<f64> {
        let n_rows: usize = self.sets.iter().map(|s| s.n_rows()).sum();
        let dim = self.sets[0].dim();
        let mut out = DMatrix::zeros(n_rows, dim);
        let mut at = 0;
        for s in &self.sets {
            out.rows_mut(at, s.n_rows()).copy_from(s.h_mat());
            at += s.n_rows();
        }
        out
    }

    fn h_vec(&self) -> DVector<f64> {
        let vals: Vec<f64> = self.sets.iter().flat_map(|s| s.h_vec().iter().copied()).collect();
        DVector::from_vec(vals)
    }
}

impl SqpSolver {
    pub fn new(ocp: DiscreteOcp, settings: SqpSettings) -> Result<Self, OcpError> {
        ocp.validate()?;
        let slack_nodes = (1..=ocp.horizon)
            .filter(|&i| {
                let state = ocp.constrains_node(i) && ocp.x_set.n_rows() > 0;
                let term = i == ocp.horizon && ocp.terminal_set.as_ref().is_some_and(|o| o.n_rows() > 0);
                state || term
            })
            .collect();
        Ok(Self {
            ocp,
            settings,
            slack_nodes,
        })
    }

    pub fn ocp(&self) -> &DiscreteOcp {
        &self.ocp
    }

    pub fn settings(&self) -> &SqpSettings {
        &self.settings
    }

    fn node_rows(&self, node: usize) -> NodeRows<'_> {
        let mut sets = Vec::new();
        if self.ocp.constrains_node(node) && self.ocp.x_set.n_rows() > 0 {
            sets.push(&self.ocp.x_set);
        }
        if node == self.ocp.horizon {
            if let Some(o) = self.ocp.terminal_set.as_ref().filter(|o| o.n_rows() > 0) {
                sets.push(o);
            }
        }
        NodeRows { sets }
    }

    /// `Σ_i max(0, worst row violation at node i)` over slack nodes.
    fn state_violation(&self, xi: &[DVector<f64>]) -> f64 {
        self.slack_nodes
            .iter()
            .map(|&i| {
                let rows = self.node_rows(i);
                rows.sets
                    .iter()
                    .map(|s| s.max_violation(&xi[i]))
                    .fold(0.0f64, f64::max)
            })
            .sum()
    }

    fn merit(&self, xi: &[DVector<f64>], mu: &[DVector<f64>], beta: f64) -> f64 {
        self.ocp.objective(xi, mu) + beta * self.state_violation(xi)
    }

    pub fn solve(&self, x: &DVector<f64>, warm: Option<&OcpWarmStart>) -> Result<OcpSolution, OcpError> {
        let start = Instant::now();
        let ocp = &self.ocp;
        let (n, m, horizon) = (ocp.model_d.n(), ocp.model_d.m(), ocp.horizon);
        if x.len() != n {
            return Err(OcpError::Dimension("initial state"));
        }
        let d = horizon * m;
        let ns = self.slack_nodes.len();
        let (q_d, r_d) = ocp.cost.discrete(ocp.t_d());

        let mut mu: Vec<DVector<f64>> = match warm {
            Some(w) if w.mu.len() == horizon => w
                .mu
                .iter()
                .map(|u| {
                    if u.len() == m && ocp.u_set.contains(u, 1e-9) {
                        u.clone()
                    } else {
                        DVector::zeros(m)
                    }
                })
                .collect(),
            _ => vec![DVector::zeros(m); horizon],
        };
        let mut xi = ocp.rollout(x, &mu)?;
        let mut beta = self.settings.penalty_init;
        let mut rho = self.settings.trust_radius;
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;
        let mut qp_iterations = 0;
        let mut qp_duals: Option<DVector<f64>> = None;

        // Fixed row layout: 𝒰 (per stage), node rows, slack ≥ 0, trust region.
        let hu = ocp.u_set.h_mat();
        let node_h: Vec<(DMatrix<f64>, DVector<f64>)> = self
            .slack_nodes
            .iter()
            .map(|&i| {
                let r = self.node_rows(i);
                (r.h_mat(), r.h_vec())
            })
            .collect();
        let n_u_rows = horizon * hu.nrows();
        let n_node_rows: usize = node_h.iter().map(|(h, _)| h.nrows()).sum();
        let k = n_u_rows + n_node_rows + ns + 2 * d;

        while iterations < self.settings.max_iter {
            iterations += 1;

            // Sensitivities Γ: block (i−1, j) = ∂ξ_i/∂μ_j.
            let mut jac = Vec::with_capacity(horizon);
            for j in 0..horizon {
                jac.push(ocp.model_d.linearize(&xi[j], &mu[j])?);
            }
            let mut gamma = DMatrix::zeros(horizon * n, d);
            for i in 1..=horizon {
                let row = (i - 1) * n;
                gamma
                    .view_mut((row, (i - 1) * m), (n, m))
                    .copy_from(&jac[i - 1].1);
                for j in 0..i - 1 {
                    let prev = gamma.view((row - n, j * m), (n, m)).into_owned();
                    gamma.view_mut((row, j * m), (n, m)).copy_from(&(&jac[i - 1].0 * prev));
                }
            }

            // Gauss–Newton model of the objective.
            let weight = |i: usize| if i == horizon { &ocp.terminal_cost } else { &q_d };
            let mut q_gamma = DMatrix::zeros(horizon * n, d);
            let mut grad = DVector::zeros(d);
            for i in 1..=horizon {
                let row = (i - 1) * n;
                q_gamma
                    .rows_mut(row, n)
                    .copy_from(&(weight(i) * gamma.rows(row, n)));
                grad += gamma.rows(row, n).tr_mul(&(weight(i) * &xi[i])) * 2.0;
            }
            let mut h_mu = gamma.tr_mul(&q_gamma);
            for j in 0..horizon {
                let mut blk = h_mu.view_mut((j * m, j * m), (m, m));
                blk += &r_d;
                let mut gseg = grad.rows_mut(j * m, m);
                gseg += &r_d * &mu[j] * 2.0;
            }
            h_mu *= 2.0;
            let h_mu = (&h_mu + h_mu.transpose()) * 0.5;

            let mut hessian = DMatrix::zeros(d + ns, d + ns);
            hessian.view_mut((0, 0), (d, d)).copy_from(&h_mu);
            let mut gradient = DVector::from_element(d + ns, beta);
            gradient.rows_mut(0, d).copy_from(&grad);

            let mut a_in = DMatrix::zeros(k, d + ns);
            let mut b_in = DVector::zeros(k);
            let mut at = 0;
            for j in 0..horizon {
                a_in.view_mut((at, j * m), (hu.nrows(), m)).copy_from(hu);
                b_in.rows_mut(at, hu.nrows())
                    .copy_from(&(ocp.u_set.h_vec() - hu * &mu[j]));
                at += hu.nrows();
            }
            for (s, (&node, (h, hv))) in self.slack_nodes.iter().zip(&node_h).enumerate() {
                let r = h.nrows();
                a_in.view_mut((at, 0), (r, d))
                    .copy_from(&(h * gamma.rows((node - 1) * n, n)));
                a_in.view_mut((at, d + s), (r, 1)).fill(-1.0);
                b_in.rows_mut(at, r).copy_from(&(hv - h * &xi[node]));
                at += r;
            }
            for s in 0..ns {
                a_in[(at, d + s)] = -1.0;
                at += 1;
            }
            for j in 0..d {
                a_in[(at, j)] = 1.0;
                b_in[at] = rho;
                a_in[(at + 1, j)] = -1.0;
                b_in[at + 1] = rho;
                at += 2;
            }

            let qp = QuadProg::new(hessian, gradient, a_in, b_in)?;
            let qp_warm = qp_duals.as_ref().map(|lam| WarmStart {
                z: DVector::zeros(d + ns),
                lam: lam.clone(),
                nu: None,
            });
            let sol = solve_qp(&qp, &self.settings.qp, qp_warm.as_ref())?;
            qp_iterations += sol.iterations;
            if sol.status == QpStatus::Infeasible {
                status = SolveStatus::Infeasible;
                break;
            }
            let step = sol.z.rows(0, d).into_owned();
            qp_duals = Some(sol.lam.clone());

            // Penalty update from the node-row multipliers.
            let node_duals = sol.lam.rows(n_u_rows, n_node_rows);
            let max_dual = node_duals.iter().copied().fold(0.0f64, f64::max);
            if 10.0 * max_dual > beta {
                beta = 10.0 * max_dual;
            }

            // KKT estimate at the current iterate from the QP multipliers.
            let lam_c = sol.lam.rows(0, n_u_rows + n_node_rows);
            let a_c = qp.a_in.view((0, 0), (n_u_rows + n_node_rows, d));
            let stationarity = (&grad + a_c.tr_mul(&lam_c)).amax();
            let resid_c = -qp.b_in.rows(0, n_u_rows + n_node_rows);
            let complementarity = lam_c
                .iter()
                .zip(resid_c.iter())
                .map(|(l, r)| l.min(-r).abs())
                .fold(0.0f64, f64::max);
            let primal = ocp.max_violation(&xi, &mu).max(0.0);
            let kkt = stationarity.max(complementarity).max(primal);

            let step_norm = step.amax();
            let merit_now = self.merit(&xi, &mu, beta);
            let lin_violation: f64 = {
                let mut total = 0.0;
                let mut row = n_u_rows;
                for (h, _) in &node_h {
                    let r = h.nrows();
                    let lhs = qp.a_in.view((row, 0), (r, d)) * &step;
                    let worst = (0..r).map(|i| lhs[i] - qp.b_in[row + i]).fold(0.0f64, f64::max);
                    total += worst;
                    row += r;
                }
                total
            };
            let model_decrease = -(0.5 * step.dot(&(&h_mu * &step)) + grad.dot(&step))
                + beta * (self.state_violation(&xi) - lin_violation);

            let trial_mu: Vec<DVector<f64>> = (0..horizon)
                .map(|j| &mu[j] + step.rows(j * m, m))
                .collect();
            let trial_xi = ocp.rollout(x, &trial_mu).ok();
            let trial_merit = trial_xi
                .as_ref()
                .map_or(f64::INFINITY, |t| self.merit(t, &trial_mu, beta));

            let converged = step_norm <= self.settings.step_tol
                || kkt <= self.settings.kkt_tol
                || model_decrease <= 1e-14 * (1.0 + merit_now.abs());
            if converged {
                if trial_merit <= merit_now {
                    if let Some(t) = trial_xi {
                        mu = trial_mu;
                        xi = t;
                    }
                }
                status = SolveStatus::Optimal;
                break;
            }

            let ratio = (merit_now - trial_merit) / model_decrease;
            if ratio >= 0.1 {
                mu = trial_mu;
                xi = trial_xi.expect("finite merit implies a rollout");
                if ratio >= 0.75 && step_norm >= 0.99 * rho {
                    rho *= 1.5;
                }
            } else {
                rho *= 0.5;
                if rho < 1e-12 {
                    break;
                }
            }
        }

        let value = ocp.objective(&xi, &mu);
        Ok(OcpSolution {
            mu,
            xi,
            value,
            stats: SolveStats {
                iterations,
                qp_iterations,
                wall_time: start.elapsed().as_secs_f64(),
            },
            status,
            qp_duals: None,
        })
    }
}

/// One-shot SQP solve with default settings.
pub fn solve_nonlinear_ocp(
    ocp: &DiscreteOcp,
    x: &DVector<f64>,
    warm: Option<&OcpWarmStart>,
) -> Result<OcpSolution, OcpError> {
    SqpSolver::new(ocp.clone(), SqpSettings::default())?.solve(x, warm)
}
