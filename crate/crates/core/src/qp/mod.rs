//! Convex quadratic programs
//!
//! ```text
//! min ½ zᵀ H z + gᵀ z   s.t.  A_in z ≤ b_in,  A_eq z = b_eq
//! ```
//!
//! solved by a proximal-point outer loop around a semismooth Newton method
//! on the Fischer–Burmeister reformulation of the KKT conditions. The
//! proximal term keeps every Newton system positive definite, so the method
//! handles convex (not only strictly convex) Hessians and redundant
//! equality rows. Primal infeasibility is detected from the drift of the
//! dual iterates between proximal steps.

mod lp;

pub use lp::{solve_lp, LpError, LpSolution};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("Hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Hessian is not convex (smallest eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("problem data must be finite")]
    NonFinite,
    #[error("tolerance must be positive")]
    InvalidTolerance,
}

#[derive(Clone, Debug)]
pub struct QuadProg {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: Option<DMatrix<f64>>,
    pub b_eq: Option<DVector<f64>>,
}

impl QuadProg {
    pub fn new(
        hessian: DMatrix<f64>,
        gradient: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, QpError> {
        let qp = Self {
            hessian,
            gradient,
            a_in,
            b_in,
            a_eq: None,
            b_eq: None,
        };
        qp.check_shapes()?;
        Ok(qp)
    }

    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Result<Self, QpError> {
        let d = gradient.len();
        Self::new(hessian, gradient, DMatrix::zeros(0, d), DVector::zeros(0))
    }

    pub fn with_equality(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Result<Self, QpError> {
        self.a_eq = Some(a_eq);
        self.b_eq = Some(b_eq);
        self.check_shapes()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn n_in(&self) -> usize {
        self.b_in.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.as_ref().map_or(0, DVector::len)
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    /// Shape, finiteness and symmetry checks (cheap, run on every solve).
    pub fn check_shapes(&self) -> Result<(), QpError> {
        let d = self.gradient.len();
        if self.hessian.nrows() != d || self.hessian.ncols() != d {
            return Err(QpError::Dimension("hessian"));
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimension("inequalities"));
        }
        match (&self.a_eq, &self.b_eq) {
            (None, None) => {}
            (Some(a), Some(b)) if a.ncols() == d && a.nrows() == b.len() => {}
            _ => return Err(QpError::Dimension("equalities")),
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        let finite_v = |v: &DVector<f64>| v.iter().all(|v| v.is_finite());
        if !finite(&self.hessian)
            || !finite_v(&self.gradient)
            || !finite(&self.a_in)
            || !finite_v(&self.b_in)
            || self.a_eq.as_ref().is_some_and(|a| !finite(a))
            || self.b_eq.as_ref().is_some_and(|b| !finite_v(b))
        {
            return Err(QpError::NonFinite);
        }
        let scale = self.hessian.abs().max().max(1.0);
        let asym = (&self.hessian - self.hessian.transpose()).abs().max();
        if asym > 1e-9 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }

    /// Smallest Hessian eigenvalue must be ≥ −1e-10. Costs an eigen
    /// decomposition, so it is not part of the per-solve checks.
    pub fn check_convex(&self) -> Result<f64, QpError> {
        let sym = (&self.hessian + self.hessian.transpose()) * 0.5;
        let lmin = sym.symmetric_eigenvalues().min();
        if lmin < -1e-10 {
            Err(QpError::NotConvex(lmin))
        } else {
            Ok(lmin)
        }
    }

    /// KKT residuals of a primal-dual point.
    pub fn kkt(&self, z: &DVector<f64>, lam: &DVector<f64>, nu: &DVector<f64>) -> KktResidual {
        let mut grad = &self.hessian * z + &self.gradient;
        if self.n_in() > 0 {
            grad += self.a_in.tr_mul(lam);
        }
        let mut primal: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        if self.n_in() > 0 {
            let r = &self.a_in * z - &self.b_in;
            for i in 0..r.len() {
                primal = primal.max(r[i]);
                complementarity = complementarity.max(lam[i].min(-r[i]).abs());
            }
            let neg_dual = lam.iter().fold(0.0f64, |acc, &v| acc.max(-v));
            primal = primal.max(0.0);
            complementarity = complementarity.max(neg_dual);
        }
        if let (Some(a), Some(b)) = (&self.a_eq, &self.b_eq) {
            if a.nrows() > 0 {
                grad += a.tr_mul(nu);
                primal = primal.max((a * z - b).amax());
            }
        }
        KktResidual {
            stationarity: grad.amax(),
            primal,
            complementarity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality multipliers (≥ 0).
    pub lam: DVector<f64>,
    /// Equality multipliers.
    pub nu: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub lam: DVector<f64>,
    pub nu: Option<DVector<f64>>,
}

impl WarmStart {
    pub fn from_solution(sol: &QpSolution) -> Self {
        Self {
            z: sol.z.clone(),
            lam: sol.lam.clone(),
            nu: Some(sol.nu.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub tol: f64,
    /// Cap on the total number of Newton iterations.
    pub max_iter: usize,
    /// Proximal weight.
    pub sigma: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 4000,
            sigma: 1e-7,
        }
    }
}

impl QpSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// `φ(a, b) = a + b − √(a² + b²)` and its partial derivatives.
fn fischer_burmeister(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    let phi = if a > 0.0 && b > 0.0 {
        2.0 * a * b / (a + b + r)
    } else {
        a + b - r
    };
    if r > 1e-300 {
        (phi, 1.0 - a / r, 1.0 - b / r)
    } else {
        let c = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        (phi, c, c)
    }
}

struct Prox<'a> {
    qp: &'a QuadProg,
    sigma: f64,
    z_bar: DVector<f64>,
    lam_bar: DVector<f64>,
    nu_bar: DVector<f64>,
}

struct ProxResidual {
    stat: DVector<f64>,
    eq: DVector<f64>,
    comp: DVector<f64>,
    d_lam: DVector<f64>,
    d_y: DVector<f64>,
    az: DVector<f64>,
}

impl ProxResidual {
    fn merit(&self) -> f64 {
        0.5 * (self.stat.norm_squared() + self.eq.norm_squared() + self.comp.norm_squared())
    }

    fn amax(&self) -> f64 {
        self.stat.amax().max(self.eq.amax()).max(self.comp.amax())
    }
}

impl Prox<'_> {
    fn residual(
        &self,
        z: &DVector<f64>,
        lam: &DVector<f64>,
        nu: &DVector<f64>,
        az: DVector<f64>,
    ) -> ProxResidual {
        let qp = self.qp;
        let mut stat = &qp.hessian * z + &qp.gradient + (z - &self.z_bar) * self.sigma;
        if qp.n_in() > 0 {
            stat += qp.a_in.tr_mul(lam);
        }
        let eq = match (&qp.a_eq, &qp.b_eq) {
            (Some(a), Some(b)) if a.nrows() > 0 => {
                stat += a.tr_mul(nu);
                a * z - b - (nu - &self.nu_bar) * self.sigma
            }
            _ => DVector::zeros(0),
        };
        let k = qp.n_in();
        let mut comp = DVector::zeros(k);
        let mut d_lam = DVector::zeros(k);
        let mut d_y = DVector::zeros(k);
        for i in 0..k {
            let y = qp.b_in[i] - az[i] + self.sigma * (lam[i] - self.lam_bar[i]);
            let (phi, da, db) = fischer_burmeister(lam[i], y);
            comp[i] = phi;
            d_lam[i] = da;
            d_y[i] = db;
        }
        ProxResidual {
            stat,
            eq,
            comp,
            d_lam,
            d_y,
            az,
        }
    }
}

/// Solves `qp` to KKT tolerance `settings.tol`.
///
/// `MaxIter` and `Infeasible` outcomes are reported through
/// [`QpSolution::status`]; `Err` is reserved for malformed problem data.
pub fn solve_qp(
    qp: &QuadProg,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    let start = Instant::now();
    if !(settings.tol > 0.0) {
        return Err(QpError::InvalidTolerance);
    }
    qp.check_shapes()?;
    let (d, k, e) = (qp.dim(), qp.n_in(), qp.n_eq());

    let mut z = DVector::zeros(d);
    let mut lam = DVector::zeros(k);
    let mut nu = DVector::zeros(e);
    if let Some(w) = warm {
        if w.z.len() == d {
            z.copy_from(&w.z);
        }
        if w.lam.len() == k {
            lam = w.lam.map(|v| v.max(0.0));
        }
        if let Some(wn) = w.nu.as_ref().filter(|v| v.len() == e) {
            nu.copy_from(wn);
        }
    }

    let finish = |z: DVector<f64>, lam: DVector<f64>, nu: DVector<f64>, status, iterations| {
        let lam = lam.map(|v: f64| v.max(0.0));
        let kkt = qp.kkt(&z, &lam, &nu).max();
        QpSolution {
            z,
            lam,
            nu,
            status,
            iterations,
            kkt_residual: kkt,
            wall_time: start.elapsed().as_secs_f64(),
        }
    };

    if qp.kkt(&z, &lam, &nu).max() <= settings.tol {
        return Ok(finish(z, lam, nu, QpStatus::Optimal, 0));
    }
    let finish_capped = |z: DVector<f64>, lam: DVector<f64>, nu: DVector<f64>, iterations| {
        let sol = finish(z, lam, nu, QpStatus::MaxIter, iterations);
        let status = if sol.kkt_residual <= settings.tol {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIter
        };
        QpSolution { status, ..sol }
    };

    let sigma = settings.sigma * qp.hessian.diagonal().amax().max(1.0);
    let eq_gram = qp
        .a_eq
        .as_ref()
        .filter(|a| a.nrows() > 0)
        .map(|a| a.tr_mul(a) / sigma);
    let diag_scale = qp.hessian.diagonal().amax().max(sigma);
    let row_norm2: Vec<f64> = (0..k).map(|i| qp.a_in.row(i).norm_squared()).collect();
    // Rows with a single nonzero only touch the diagonal of the Newton matrix.
    let single: Vec<Option<usize>> = (0..k)
        .map(|i| {
            let mut nz = (0..d).filter(|&j| qp.a_in[(i, j)] != 0.0);
            match (nz.next(), nz.next()) {
                (Some(j), None) => Some(j),
                _ => None,
            }
        })
        .collect();
    // The outer loop aims an order of magnitude below `tol` so that the
    // proximal bias does not dominate the primal error.
    let outer_tol = 0.1 * settings.tol;
    let inner_tol = 0.01 * settings.tol;
    let mut iterations = 0usize;

    let mut stalled = 0;
    loop {
        let before = iterations;
        let prox = Prox {
            qp,
            sigma,
            z_bar: z.clone(),
            lam_bar: lam.clone(),
            nu_bar: nu.clone(),
        };
        let mut res = prox.residual(&z, &lam, &nu, &qp.a_in * &z);

        // Inner semismooth Newton on the proximal subproblem.
        for _ in 0..100 {
            if res.amax() <= inner_tol {
                break;
            }
            if iterations >= settings.max_iter {
                return Ok(finish_capped(z, lam, nu, iterations));
            }
            iterations += 1;

            let c = &res.d_lam + &res.d_y * sigma;
            let w = res.d_y.component_div(&c);
            let mut m = &qp.hessian + DMatrix::identity(d, d) * sigma;
            if let Some(g) = &eq_gram {
                m += g;
            }
            // Rows with negligible weight (inactive constraints) are skipped.
            let mut rows = Vec::new();
            for i in 0..k {
                if w[i] * row_norm2[i] <= 1e-15 * diag_scale {
                    continue;
                }
                match single[i] {
                    Some(j) => m[(j, j)] += w[i] * row_norm2[i],
                    None => rows.push(i),
                }
            }
            if !rows.is_empty() {
                let mut scaled = DMatrix::zeros(rows.len(), d);
                for (r, &i) in rows.iter().enumerate() {
                    scaled.row_mut(r).copy_from(&(qp.a_in.row(i) * w[i].sqrt()));
                }
                m += scaled.tr_mul(&scaled);
            }
            let mut rhs = -&res.stat;
            if let Some(a) = qp.a_eq.as_ref().filter(|a| a.nrows() > 0) {
                rhs -= a.tr_mul(&res.eq) / sigma;
            }
            if k > 0 {
                rhs += qp.a_in.tr_mul(&res.comp.component_div(&c));
            }
            let chol = match m.clone().cholesky() {
                Some(ch) => ch,
                None => {
                    let lmin = qp.check_convex().err().map_or(f64::NAN, |e| match e {
                        QpError::NotConvex(v) => v,
                        _ => f64::NAN,
                    });
                    return Err(QpError::NotConvex(lmin));
                }
            };
            let dz = chol.solve(&rhs);
            let a_dz = &qp.a_in * &dz;
            let dlam = if k > 0 {
                (-&res.comp + res.d_y.component_mul(&a_dz)).component_div(&c)
            } else {
                DVector::zeros(0)
            };
            let dnu = match &qp.a_eq {
                Some(a) if e > 0 => (&res.eq + a * &dz) / sigma,
                _ => DVector::zeros(0),
            };

            // Armijo backtracking on ½‖Φ‖².
            let merit0 = res.merit();
            let mut t = 1.0;
            loop {
                let zt = &z + &dz * t;
                let lt = &lam + &dlam * t;
                let nt = &nu + &dnu * t;
                let trial = prox.residual(&zt, &lt, &nt, &res.az + &a_dz * t);
                if trial.merit() <= (1.0 - 1e-4 * t) * merit0 || t < 1e-10 {
                    z = zt;
                    lam = lt;
                    nu = nt;
                    res = trial;
                    break;
                }
                t *= 0.5;
            }
        }

        let kkt = qp.kkt(&z, &lam.map(|v| v.max(0.0)), &nu).max();
        if kkt <= outer_tol {
            return Ok(finish(z, lam, nu, QpStatus::Optimal, iterations));
        }
        if infeasibility_certificate(qp, &(&lam - &prox.lam_bar), &(&nu - &prox.nu_bar)) {
            return Ok(finish(z, lam, nu, QpStatus::Infeasible, iterations));
        }
        // An outer step with no inner iteration cannot make further progress.
        stalled = if iterations == before { stalled + 1 } else { 0 };
        if iterations >= settings.max_iter || stalled >= 2 {
            return Ok(finish_capped(z, lam, nu, iterations));
        }
    }
}

/// Farkas test on the dual drift `(δλ, δν)`: `A_inᵀ δλ + A_eqᵀ δν ≈ 0` with
/// `b_inᵀ δλ + b_eqᵀ δν < 0` and `δλ ≥ 0`.
fn infeasibility_certificate(qp: &QuadProg, dlam: &DVector<f64>, dnu: &DVector<f64>) -> bool {
    let scale = dlam.amax().max(dnu.amax());
    if !(scale > 1e-6) || dlam.iter().any(|&v| v < -1e-6 * scale) {
        return false;
    }
    let mut dual = qp.a_in.tr_mul(dlam);
    let mut cost = qp.b_in.dot(dlam);
    if let (Some(a), Some(b)) = (&qp.a_eq, &qp.b_eq) {
        if a.nrows() > 0 {
            dual += a.tr_mul(dnu);
            cost += b.dot(dnu);
        }
    }
    dual.amax() <= 1e-6 * scale && cost < -1e-6 * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn solve(qp: &QuadProg) -> QpSolution {
        solve_qp(qp, &QpSettings::default(), None).unwrap()
    }

    #[test]
    fn scalar_with_active_bound() {
        let qp = QuadProg::new(dmatrix![2.0], dvector![0.0], dmatrix![1.0], dvector![-1.0]).unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] + 1.0).abs() < 1e-7);
        assert!((sol.lam[0] - 2.0).abs() < 1e-6);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn equality_constrained_symmetric() {
        let qp = QuadProg::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2))
            .unwrap()
            .with_equality(dmatrix![1.0, 1.0], dvector![1.0])
            .unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z - dvector![0.5, 0.5]).amax() < 1e-7);
    }

    #[test]
    fn redundant_equalities_are_fine() {
        let qp = QuadProg::unconstrained(DMatrix::identity(2, 2), dvector![1.0, -1.0])
            .unwrap()
            .with_equality(dmatrix![1.0, 1.0; 2.0, 2.0], dvector![1.0, 2.0])
            .unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z - dvector![-0.5, 1.5]).amax() < 1e-6);
    }

    #[test]
    fn detects_infeasibility() {
        let qp = QuadProg::new(
            dmatrix![2.0],
            dvector![0.0],
            dmatrix![1.0; -1.0],
            dvector![-1.0, -1.0],
        )
        .unwrap();
        assert_eq!(solve(&qp).status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_nonconvex_and_asymmetric() {
        let qp = QuadProg::unconstrained(dmatrix![-1.0], dvector![1.0]).unwrap();
        assert!(matches!(qp.check_convex(), Err(QpError::NotConvex(_))));
        assert!(matches!(
            solve_qp(&qp, &QpSettings::default(), None),
            Err(QpError::NotConvex(_))
        ));
        assert!(matches!(
            QuadProg::unconstrained(dmatrix![1.0, 1.0; 0.0, 1.0], dvector![0.0, 0.0]),
            Err(QpError::NotSymmetric(_))
        ));
    }

    #[test]
    fn convex_but_singular_hessian_lp_like() {
        // min z1 + z2 over the box [0, 1]².
        let qp = QuadProg::new(
            DMatrix::zeros(2, 2),
            dvector![1.0, 1.0],
            dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 0.0; 0.0, 1.0],
            dvector![0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.z.amax() < 1e-6);
    }

    #[test]
    fn max_iter_is_reported() {
        let qp = QuadProg::new(dmatrix![2.0], dvector![0.0], dmatrix![1.0], dvector![-1.0]).unwrap();
        let settings = QpSettings {
            max_iter: 1,
            tol: 1e-14,
            ..QpSettings::default()
        };
        let sol = solve_qp(&qp, &settings, None).unwrap();
        assert_eq!(sol.status, QpStatus::MaxIter);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn warm_start_at_solution_is_immediate() {
        let qp = QuadProg::new(
            dmatrix![4.0, 1.0; 1.0, 2.0],
            dvector![1.0, 1.0],
            dmatrix![1.0, 1.0; -1.0, 0.0],
            dvector![-1.0, 0.3],
        )
        .unwrap();
        let first = solve(&qp);
        assert_eq!(first.status, QpStatus::Optimal);
        let again = solve_qp(&qp, &QpSettings::default(), Some(&WarmStart::from_solution(&first))).unwrap();
        assert_eq!(again.status, QpStatus::Optimal);
        assert!(again.iterations <= 2);
        assert!((again.z - first.z).amax() < 1e-6);
    }

    #[test]
    fn fb_function_properties() {
        for (a, b) in [(0.0, 0.0), (1.0, 0.0), (0.0, 3.0)] {
            assert!(fischer_burmeister(a, b).0.abs() < 1e-15);
        }
        assert!(fischer_burmeister(1.0, 1.0).0 > 0.0);
        assert!(fischer_burmeister(-1.0, 1.0).0 < 0.0);
        let (phi, ..) = fischer_burmeister(1e8, 1e-8);
        assert!((phi - 1e-8).abs() < 1e-20);
    }
}
