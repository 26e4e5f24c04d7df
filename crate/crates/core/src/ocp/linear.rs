use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{shift_warm_start, stack, unstack, DiscreteOcp, OcpError, OcpSolution, OcpWarmStart, SolveStats, SolveStatus};
use crate::qp::{solve_qp, QpSettings, QpStatus, QuadProg, WarmStart};

/// Condensed-QP solver for a linear OCP. The Hessian and constraint matrix
/// depend only on the OCP and are built once; each solve only forms the
/// state-dependent gradient and right-hand side.
#[derive(Clone, Debug)]
pub struct LinearOcpSolver {
    ocp: DiscreteOcp,
    settings: QpSettings,
    template: QuadProg,
    /// `g = gradient_map · x`.
    gradient_map: DMatrix<f64>,
    /// `b_in = b_const − b_map · x`.
    b_const: DVector<f64>,
    b_map: DMatrix<f64>,
    /// Constant objective term `xᵀ (Q_d + Φᵀ Q̄ Φ) x`.
    offset_map: DMatrix<f64>,
    /// Per stage: first constraint row, 𝒰 rows, 𝒳 rows.
    stage_rows: Vec<(usize, usize, usize)>,
}

impl LinearOcpSolver {
    pub fn new(ocp: DiscreteOcp, settings: QpSettings) -> Result<Self, OcpError> {
        ocp.validate()?;
        let (a_d, b_d) = ocp.model_d.linear_part().ok_or(OcpError::NotLinear)?;
        let (n, m, horizon) = (ocp.model_d.n(), ocp.model_d.m(), ocp.horizon);
        let (q_d, r_d) = ocp.cost.discrete(ocp.t_d());
        let d = horizon * m;

        // powers[i] = A_dⁱ, i = 0..N.
        let mut powers = vec![DMatrix::identity(n, n)];
        for i in 1..=horizon {
            powers.push(a_d * &powers[i - 1]);
        }
        // Node i (1..N) occupies block row i−1 of Γ and Φ.
        let mut gamma = DMatrix::zeros(horizon * n, d);
        let mut phi = DMatrix::zeros(horizon * n, n);
        let mut ab = Vec::with_capacity(horizon);
        for k in 0..horizon {
            ab.push(&powers[k] * b_d);
        }
        for i in 1..=horizon {
            phi.view_mut(((i - 1) * n, 0), (n, n)).copy_from(&powers[i]);
            for j in 0..i {
                gamma
                    .view_mut(((i - 1) * n, j * m), (n, m))
                    .copy_from(&ab[i - 1 - j]);
            }
        }
        let weight = |i: usize| if i == horizon { &ocp.terminal_cost } else { &q_d };
        let mut q_gamma = DMatrix::zeros(horizon * n, d);
        let mut q_phi = DMatrix::zeros(horizon * n, n);
        for i in 1..=horizon {
            let rows = (i - 1) * n;
            q_gamma
                .rows_mut(rows, n)
                .copy_from(&(weight(i) * gamma.rows(rows, n)));
            q_phi.rows_mut(rows, n).copy_from(&(weight(i) * phi.rows(rows, n)));
        }
        let mut hessian = gamma.tr_mul(&q_gamma);
        for j in 0..horizon {
            let mut blk = hessian.view_mut((j * m, j * m), (m, m));
            blk += &r_d;
        }
        hessian *= 2.0;
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let gradient_map = gamma.tr_mul(&q_phi) * 2.0;
        let offset_map = &q_d + phi.tr_mul(&q_phi);

        // Constraint rows, grouped by stage: 𝒰 for μ_j, then 𝒳 / Ω at node j+1.
        let mut coeff_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut const_rows: Vec<DVector<f64>> = Vec::new();
        let mut map_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut stage_rows = Vec::with_capacity(horizon);
        let mut first = 0;
        for j in 0..horizon {
            let hu = ocp.u_set.h_mat();
            let mut c = DMatrix::zeros(hu.nrows(), d);
            c.view_mut((0, j * m), (hu.nrows(), m)).copy_from(hu);
            coeff_rows.push(c);
            const_rows.push(ocp.u_set.h_vec().clone());
            map_rows.push(DMatrix::zeros(hu.nrows(), n));

            let node = j + 1;
            let mut add_state_rows = |set: &crate::sets::Polyhedron| {
                let hx = set.h_mat();
                coeff_rows.push(hx * gamma.rows((node - 1) * n, n));
                const_rows.push(set.h_vec().clone());
                map_rows.push(hx * &powers[node]);
            };
            let mut x_rows = 0;
            if ocp.constrains_node(node) {
                add_state_rows(&ocp.x_set);
                x_rows = ocp.x_set.n_rows();
            }
            if node == horizon {
                if let Some(omega) = &ocp.terminal_set {
                    add_state_rows(omega);
                }
            }
            stage_rows.push((first, hu.nrows(), x_rows));
            first = const_rows.iter().map(DVector::len).sum();
        }
        let k: usize = const_rows.iter().map(DVector::len).sum();
        let mut a_in = DMatrix::zeros(k, d);
        let mut b_const = DVector::zeros(k);
        let mut b_map = DMatrix::zeros(k, n);
        let mut at = 0;
        for ((c, b), mp) in coeff_rows.iter().zip(&const_rows).zip(&map_rows) {
            let r = b.len();
            a_in.rows_mut(at, r).copy_from(c);
            b_const.rows_mut(at, r).copy_from(b);
            b_map.rows_mut(at, r).copy_from(mp);
            at += r;
        }
        let template = QuadProg::new(hessian, DVector::zeros(d), a_in, b_const.clone())?;
        Ok(Self {
            ocp,
            settings,
            template,
            gradient_map,
            b_const,
            b_map,
            offset_map,
            stage_rows,
        })
    }

    /// [`shift_warm_start`] with the multipliers of stage `j + 1` moved to
    /// stage `j`; the last stage and the terminal-set rows start at zero.
    pub fn shifted_warm_start(&self, prev: &OcpSolution, terminal_gain: Option<&DMatrix<f64>>) -> OcpWarmStart {
        let mut warm = shift_warm_start(prev, terminal_gain);
        let Some(lam) = prev.qp_duals.as_ref().filter(|l| l.len() == self.template.n_in()) else {
            return warm;
        };
        let mut out = DVector::zeros(lam.len());
        for w in self.stage_rows.windows(2) {
            let ((to, u, x), (from, u_next, x_next)) = (w[0], w[1]);
            let nu = u.min(u_next);
            out.rows_mut(to, nu).copy_from(&lam.rows(from, nu));
            if x == x_next {
                out.rows_mut(to + u, x).copy_from(&lam.rows(from + u_next, x));
            }
        }
        warm.duals = Some(out);
        warm
    }

    pub fn ocp(&self) -> &DiscreteOcp {
        &self.ocp
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// The condensed QP in `z = (μ_0, …, μ_{N−1})` for initial state `x`.
    pub fn condense(&self, x: &DVector<f64>) -> QuadProg {
        let mut qp = self.template.clone();
        qp.gradient = &self.gradient_map * x;
        qp.b_in = &self.b_const - &self.b_map * x;
        qp
    }

    /// Objective term independent of the inputs.
    pub fn offset(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.offset_map * x))
    }

    pub fn solve(&self, x: &DVector<f64>, warm: Option<&OcpWarmStart>) -> Result<OcpSolution, OcpError> {
        let start = Instant::now();
        if x.len() != self.ocp.model_d.n() {
            return Err(OcpError::Dimension("initial state"));
        }
        let qp = self.condense(x);
        let qp_warm = warm.map(|w| WarmStart {
            z: if w.mu.len() == self.ocp.horizon {
                stack(&w.mu)
            } else {
                DVector::zeros(0)
            },
            lam: w.duals.clone().unwrap_or_else(|| DVector::zeros(0)),
            nu: None,
        });
        let sol = solve_qp(&qp, &self.settings, qp_warm.as_ref())?;
        let status = match sol.status {
            QpStatus::Optimal => SolveStatus::Optimal,
            QpStatus::MaxIter => SolveStatus::MaxIter,
            QpStatus::Infeasible => SolveStatus::Infeasible,
        };
        let mu = unstack(&sol.z, self.ocp.model_d.m());
        let xi = self.ocp.rollout(x, &mu)?;
        let value = self.ocp.objective(&xi, &mu);
        Ok(OcpSolution {
            mu,
            xi,
            value,
            stats: SolveStats {
                iterations: 1,
                qp_iterations: sol.iterations,
                wall_time: start.elapsed().as_secs_f64(),
            },
            status,
            qp_duals: Some(sol.lam),
        })
    }
}

/// Builds the condensed QP of `ocp` at `x`.
pub fn condense(ocp: &DiscreteOcp, x: &DVector<f64>) -> Result<QuadProg, OcpError> {
    Ok(LinearOcpSolver::new(ocp.clone(), QpSettings::default())?.condense(x))
}

/// Condense, solve and expand in one call; the reported wall time covers
/// the full build.
pub fn solve_linear_ocp(
    ocp: &DiscreteOcp,
    x: &DVector<f64>,
    warm: Option<&OcpWarmStart>,
) -> Result<OcpSolution, OcpError> {
    let start = Instant::now();
    let solver = LinearOcpSolver::new(ocp.clone(), QpSettings::default())?;
    let mut sol = solver.solve(x, warm)?;
    sol.stats.wall_time = start.elapsed().as_secs_f64();
    Ok(sol)
}
