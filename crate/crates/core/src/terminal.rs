//! Terminal ingredients: Riccati terminal cost, LQR terminal controller and
//! the maximal output admissible set of the terminal closed loop, plus a
//! sampling-based check of the terminal conditions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{discretize_exact_lti, ContinuousModel};
use crate::ocp::StageCost;
use crate::qp::{solve_lp, LpError};
use crate::sets::{Polyhedron, SetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("R is singular or not positive definite")]
    SingularR,
    #[error("no stabilizing initial gain found; (A, B) appears not stabilizable")]
    NotStabilizable,
    #[error("Riccati iteration did not converge (relative residual {0:e})")]
    NotConverged(f64),
    #[error("Lyapunov equation is singular")]
    SingularLyapunov,
    #[error("closed loop is not Schur stable (spectral radius {0})")]
    UnstableClosedLoop(f64),
    #[error("constraint set must contain the origin in its interior")]
    OriginNotInterior,
    #[error("admissible set not determined within {0} iterations")]
    NotDetermined(usize),
    #[error("sampling requires a bounded set")]
    UnboundedSet,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Solves `fᵀ X + X f = rhs` by Kronecker vectorization (small `n` only).
pub fn solve_lyapunov(f: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let n = f.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let ft = f.transpose();
    let op = eye.kronecker(&ft) + ft.kronecker(&eye);
    let vec_rhs = DVector::from_column_slice(rhs.as_slice());
    let sol = op.lu().solve(&vec_rhs).ok_or(TerminalError::SingularLyapunov)?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Largest real part of the eigenvalues.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

fn inverse_spd(r: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(TerminalError::SingularR)
}

/// `K = R⁻¹ Bᵀ P`.
pub fn lqr_gain(p: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    if r.nrows() != b.ncols() || p.nrows() != b.nrows() {
        return Err(TerminalError::Dimension("lqr_gain"));
    }
    Ok(inverse_spd(r)? * b.transpose() * p)
}

/// `‖AᵀP + PA − PBR⁻¹BᵀP + Q‖_F`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    (a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q).norm()
}

/// Stabilizing gain by Bass's shifted-Lyapunov construction: for
/// `β` above the spectral abscissa, `(A+βI)Z + Z(A+βI)ᵀ = 2BBᵀ` gives
/// `A − B BᵀZ⁻¹` Hurwitz whenever `Z ≻ 0`.
fn stabilizing_seed(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let n = a.nrows();
    if spectral_abscissa(a) < -1e-9 {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let rhs = b * b.transpose() * 2.0;
    let mut beta = a.norm() + 1.0;
    for _ in 0..8 {
        let shifted = a + DMatrix::identity(n, n) * beta;
        if let Ok(z) = solve_lyapunov(&shifted.transpose(), &rhs) {
            if let Some(ch) = z.cholesky() {
                let k = b.transpose() * ch.inverse();
                if spectral_abscissa(&(a - b * &k)) < 0.0 {
                    return Ok(k);
                }
            }
        }
        beta *= 2.0;
    }
    Err(TerminalError::NotStabilizable)
}

/// Stabilizing solution of the continuous algebraic Riccati equation
/// `AᵀP + PA − PBR⁻¹BᵀP + Q = 0` by Newton–Kleinman iteration.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, TerminalError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(TerminalError::Dimension("solve_care"));
    }
    let r_inv = inverse_spd(r)?;
    let mut k = stabilizing_seed(a, b)?;
    let mut p = DMatrix::zeros(n, n);
    for it in 0..200 {
        let a_cl = a - b * &k;
        let rhs = -(q + k.transpose() * r * &k);
        let next = solve_lyapunov(&a_cl, &rhs)?;
        let change = (&next - &p).norm();
        p = next;
        k = &r_inv * b.transpose() * &p;
        if it > 0 && change <= 1e-14 * p.norm().max(1e-300) {
            break;
        }
    }
    let rel = care_residual(a, b, q, r, &p) / p.norm().max(1e-300);
    if rel <= 1e-8 || p.norm() == 0.0 && care_residual(a, b, q, r, &p) <= 1e-12 {
        Ok(p)
    } else {
        Err(TerminalError::NotConverged(rel))
    }
}

#[derive(Clone, Debug)]
pub struct TerminalIngredients {
    /// Terminal cost `J(x) = xᵀ P x`.
    pub p: DMatrix<f64>,
    /// Terminal controller `κ(x) = −K x`.
    pub k: DMatrix<f64>,
    pub omega: Polyhedron,
}

impl TerminalIngredients {
    pub fn kappa(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }
}

#[derive(Clone, Debug)]
pub struct OutputAdmissibleSet {
    pub set: Polyhedron,
    /// First `t` for which the rows `H A_cl^{t+1}` are all redundant.
    pub determinedness_index: usize,
}

/// Maximal output admissible set `{x : H A_clᵗ x ≤ h, t = 0..t*}` of the
/// Schur-stable map `x⁺ = A_cl x` under `cons`. Redundant rows are dropped
/// as they are found (per-row LP), so the result is irredundant in the new
/// rows only.
pub fn max_output_admissible_set(
    a_cl: &DMatrix<f64>,
    cons: &Polyhedron,
    max_iter: usize,
) -> Result<OutputAdmissibleSet, TerminalError> {
    if a_cl.nrows() != cons.dim() || !a_cl.is_square() {
        return Err(TerminalError::Dimension("max_output_admissible_set"));
    }
    let rho = spectral_radius(a_cl);
    if rho >= 1.0 {
        return Err(TerminalError::UnstableClosedLoop(rho));
    }
    if cons.h_vec().iter().any(|&v| v <= 0.0) {
        return Err(TerminalError::OriginNotInterior);
    }
    let mut current = cons.clone();
    let mut power = a_cl.clone();
    for t in 1..=max_iter {
        let candidates = cons.h_mat() * &power;
        let mut keep: Vec<usize> = Vec::new();
        for i in 0..candidates.nrows() {
            let row = candidates.row(i).transpose();
            let bound = cons.h_vec()[i];
            let redundant = match solve_lp(&row, &current) {
                Ok(sol) => sol.value <= bound + 1e-9 * (1.0 + bound.abs()),
                Err(LpError::Unbounded) => false,
                Err(e) => return Err(e.into()),
            };
            // Rows that vanish numerically (A_clᵗ → 0) are always redundant.
            if !redundant && row.amax() > 1e-14 {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            return Ok(OutputAdmissibleSet {
                set: current,
                determinedness_index: t - 1,
            });
        }
        let rows = DMatrix::from_fn(keep.len(), cons.dim(), |r, j| candidates[(keep[r], j)]);
        let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&i| cons.h_vec()[i]));
        current = current.intersect(&Polyhedron::new(rows, rhs)?)?;
        power = &power * a_cl;
    }
    Err(TerminalError::NotDetermined(max_iter))
}

/// Builds `(P, K, Ω)` for `ẋ = A x + B u`: `P` from the CARE with the
/// continuous stage cost, `K` the LQR gain, and `Ω = O_∞` of the ZOH
/// closed loop `A_d − B_d K` at step `t_d` under `𝒳` and `κ(x) ∈ 𝒰`.
pub fn lqr_terminal_ingredients(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StageCost,
    x_set: &Polyhedron,
    u_set: &Polyhedron,
    t_d: f64,
    max_iter: usize,
) -> Result<TerminalIngredients, TerminalError> {
    let p = solve_care(a, b, &cost.q, &cost.r)?;
    let k = lqr_gain(&p, b, &cost.r)?;
    let (a_d, b_d) = discretize_exact_lti(a, b, t_d).map_err(|_| TerminalError::Dimension("t_d"))?;
    let a_cl = &a_d - &b_d * &k;
    let cons = x_set.intersect(&u_set.preimage(&(-&k))?)?;
    let omega = max_output_admissible_set(&a_cl, &cons, max_iter)?.set;
    Ok(TerminalIngredients { p, k, omega })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionCheck {
    pub passed: bool,
    /// Largest violation over all samples (≤ 0 means slack).
    pub worst: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TerminalReport {
    pub samples: usize,
    /// `κ(x) ∈ 𝒰`.
    pub input_admissible: ConditionCheck,
    /// `x + h f(x, κ(x)) ∈ Ω`.
    pub containment: ConditionCheck,
    /// `∇J(x)ᵀ f(x, κ(x)) + l(x, κ(x)) ≤ tol`.
    pub decrease: ConditionCheck,
}

impl TerminalReport {
    pub fn all_passed(&self) -> bool {
        self.input_admissible.passed && self.containment.passed && self.decrease.passed
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TerminalCheckOptions {
    pub n_samples: usize,
    pub euler_step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TerminalCheckOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            euler_step: 1e-4,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// Checks the terminal conditions at the origin and at hit-and-run samples
/// of `Ω`. The tangent-cone condition is replaced by one-step Euler
/// containment with step `opts.euler_step`.
pub fn verify_terminal_conditions(
    model: &ContinuousModel,
    ti: &TerminalIngredients,
    cost: &StageCost,
    u_set: &Polyhedron,
    opts: &TerminalCheckOptions,
) -> Result<TerminalReport, TerminalError> {
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let origin = DVector::zeros(n);
    let mut points = vec![origin.clone()];
    if opts.n_samples > 1 {
        points.extend(
            ti.omega
                .hit_and_run(&origin, opts.n_samples - 1, &mut rng)
                .ok_or(TerminalError::UnboundedSet)?,
        );
    }
    let (mut w_input, mut w_cont, mut w_dec) = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for x in &points {
        let u = ti.kappa(x);
        let f = model.eval(x, &u);
        w_input = w_input.max(u_set.max_violation(&u).max(-f64::MAX));
        w_cont = w_cont.max(ti.omega.max_violation(&(x + &f * opts.euler_step)).max(-f64::MAX));
        let decrease = 2.0 * (&ti.p * x).dot(&f) + cost.stage(x, &u);
        w_dec = w_dec.max(decrease);
    }
    let check = |worst: f64| ConditionCheck {
        passed: worst <= opts.tol,
        worst,
    };
    Ok(TerminalReport {
        samples: points.len(),
        input_admissible: check(w_input),
        containment: check(w_cont),
        decrease: check(w_dec),
    })
}
