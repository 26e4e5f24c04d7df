#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use hmpc::models::{Benchmark, DoubleIntegratorSpec, OcpOptions};
use hmpc::ocp::OcpSolver;
use hmpc::qp::{QpSettings, QuadProg};
use hmpc::simulator::{MpcController, SimConfig};

/// Minimizer of a strictly convex QP by enumerating every active set:
/// each subset's equality-constrained KKT system is solved and the
/// primal-dual feasible candidate with the lowest objective is kept.
pub fn active_set_oracle(qp: &QuadProg) -> Option<DVector<f64>> {
    let d = qp.dim();
    let k = qp.n_in();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << k) {
        let rows: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let s = rows.len();
        let mut kkt = DMatrix::zeros(d + s, d + s);
        let mut rhs = DVector::zeros(d + s);
        kkt.view_mut((0, 0), (d, d)).copy_from(&qp.hessian);
        for j in 0..d {
            rhs[j] = -qp.gradient[j];
        }
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = qp.a_in[(i, j)];
                kkt[(j, d + r)] = qp.a_in[(i, j)];
            }
            rhs[d + r] = qp.b_in[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        if (&kkt * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        let z = sol.rows(0, d).into_owned();
        let dual_ok = (0..s).all(|r| sol[d + r] >= -1e-10);
        let primal_ok = (&qp.a_in * &z - &qp.b_in).iter().all(|v| *v <= 1e-10);
        if dual_ok && primal_ok {
            let f = qp.objective(&z);
            if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.map(|(_, z)| z)
}

/// Random strictly convex QP with `d` variables and `k` inequalities,
/// feasible by construction.
pub fn random_qp<R: Rng>(rng: &mut R, d: usize, k: usize) -> QuadProg {
    let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(d, d) * rng.gen_range(0.05..1.0);
    let g = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
    let a = DMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
    let z0 = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(k, |_, _| rng.gen_range(0.0..1.0));
    let b = &a * z0 + slack;
    QuadProg::new(h, g, a, b).expect("well-formed QP")
}

/// Maximum of `cᵀz` over `{Hz ≤ h}` by enumerating the vertices: every
/// `d`-subset of rows whose square system is nonsingular and whose
/// solution satisfies all rows.
pub fn vertex_oracle(c: &DVector<f64>, h_mat: &DMatrix<f64>, h_vec: &DVector<f64>) -> Option<f64> {
    let (k, d) = h_mat.shape();
    let mut best: Option<f64> = None;
    let mut idx: Vec<usize> = (0..d).collect();
    if d > k {
        return None;
    }
    loop {
        let a = DMatrix::from_fn(d, d, |r, j| h_mat[(idx[r], j)]);
        let b = DVector::from_fn(d, |r, _| h_vec[idx[r]]);
        if a.determinant().abs() > 1e-10 {
            if let Some(v) = a.lu().solve(&b) {
                if (h_mat * &v - h_vec).iter().all(|r| *r <= 1e-9) {
                    let val = c.dot(&v);
                    best = Some(best.map_or(val, |bv: f64| bv.max(val)));
                }
            }
        }
        // next combination
        let mut i = d;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < k - d + i {
                idx[i] += 1;
                for j in i + 1..d {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn double_integrator() -> Benchmark {
    DoubleIntegratorSpec::default().benchmark().expect("default parameters")
}

/// Solver for the benchmark at step `t_d` with default options.
pub fn solver(bench: &Benchmark, t_d: f64) -> OcpSolver {
    let ocp = bench.ocp(t_d, &OcpOptions::default()).expect("ocp");
    OcpSolver::new(ocp, QpSettings::default()).expect("solver")
}

/// Controller configured the way the batch runner configures it.
pub fn controller(bench: &Benchmark, cfg: &SimConfig) -> MpcController {
    let (_, k) = bench.lqr().expect("lqr");
    MpcController::new(solver(bench, cfg.t_d), cfg.resolved_warm_start()).with_terminal_gain(k)
}
