//! Dense two-phase simplex for `max cᵀz s.t. H z ≤ h` with free `z`.
//!
//! Free variables are split as `z = z⁺ − z⁻`; rows with negative right-hand
//! side get an artificial variable for phase I. Bland's rule keeps the
//! pivoting deterministic and cycle-free.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sets::Polyhedron;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("LP is unbounded in the objective direction")]
    Unbounded,
    #[error("LP is infeasible")]
    Infeasible,
    #[error("objective has dimension {0}, polyhedron has dimension {1}")]
    Dimension(usize, usize),
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub z: DVector<f64>,
    pub value: f64,
}

const PIVOT_EPS: f64 = 1e-11;

struct Tableau {
    /// Constraint rows followed by the objective row. The last column is the
    /// right-hand side.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    n_rows: usize,
}

impl Tableau {
    fn rhs_col(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[(row, col)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(row, j)] /= p;
        }
        for i in 0..self.t.nrows() {
            if i == row {
                continue;
            }
            let f = self.t[(i, col)];
            if f != 0.0 {
                for j in 0..ncols {
                    let v = self.t[(row, j)];
                    self.t[(i, j)] -= f * v;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Minimizes the objective row over the columns in `allowed`.
    /// The objective row stores reduced costs; the RHS entry holds `−value`.
    fn run(&mut self, allowed: usize) -> Result<(), LpError> {
        let obj = self.n_rows;
        let rhs = self.rhs_col();
        loop {
            let Some(col) = (0..allowed).find(|&j| self.t[(obj, j)] < -PIVOT_EPS) else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.n_rows {
                let a = self.t[(i, col)];
                if a > PIVOT_EPS {
                    let ratio = self.t[(i, rhs)] / a;
                    best = match best {
                        Some((bi, br))
                            if ratio > br + 1e-12
                                || ((ratio - br).abs() <= 1e-12 && self.basis[i] > self.basis[bi]) =>
                        {
                            Some((bi, br))
                        }
                        _ => Some((i, ratio)),
                    };
                }
            }
            match best {
                Some((row, _)) => self.pivot(row, col),
                None => return Err(LpError::Unbounded),
            }
        }
    }
}

/// Maximizes `cᵀz` over `poly`.
pub fn solve_lp(c: &DVector<f64>, poly: &Polyhedron) -> Result<LpSolution, LpError> {
    let d = poly.dim();
    if c.len() != d {
        return Err(LpError::Dimension(c.len(), d));
    }
    let k = poly.n_rows();
    if k == 0 {
        return if c.amax() == 0.0 {
            Ok(LpSolution {
                z: DVector::zeros(d),
                value: 0.0,
            })
        } else {
            Err(LpError::Unbounded)
        };
    }
    let (h_mat, h_vec) = (poly.h_mat(), poly.h_vec());
    let negative: Vec<usize> = (0..k).filter(|&i| h_vec[i] < 0.0).collect();
    let n_art = negative.len();
    // Columns: z⁺ (d), z⁻ (d), slacks (k), artificials (n_art), rhs.
    let n_struct = 2 * d + k;
    let ncols = n_struct + n_art + 1;
    let mut t = DMatrix::zeros(k + 1, ncols);
    let mut basis = vec![0; k];
    let mut art = 0;
    for i in 0..k {
        let sign = if h_vec[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            t[(i, j)] = sign * h_mat[(i, j)];
            t[(i, d + j)] = -sign * h_mat[(i, j)];
        }
        t[(i, 2 * d + i)] = sign;
        t[(i, ncols - 1)] = sign * h_vec[i];
        if sign < 0.0 {
            t[(i, n_struct + art)] = 1.0;
            basis[i] = n_struct + art;
            art += 1;
        } else {
            basis[i] = 2 * d + i;
        }
    }
    let mut tab = Tableau { t, basis, n_rows: k };

    if n_art > 0 {
        // Phase I: minimize the sum of artificials, expressed in reduced costs.
        for &i in &negative {
            for j in 0..ncols {
                let v = tab.t[(i, j)];
                tab.t[(k, j)] -= v;
            }
        }
        for a in 0..n_art {
            tab.t[(k, n_struct + a)] = 0.0;
        }
        tab.run(n_struct + n_art)?;
        if -tab.t[(k, ncols - 1)] > 1e-9 * (1.0 + h_vec.amax()) {
            return Err(LpError::Infeasible);
        }
        // Drive remaining (zero-valued) artificials out of the basis.
        for i in 0..k {
            if tab.basis[i] >= n_struct {
                if let Some(col) = (0..n_struct).find(|&j| tab.t[(i, j)].abs() > PIVOT_EPS) {
                    tab.pivot(i, col);
                }
            }
        }
        for i in 0..k {
            for a in 0..n_art {
                tab.t[(i, n_struct + a)] = 0.0;
            }
        }
    }

    // Phase II objective: minimize −cᵀz, then price out the basis.
    for j in 0..ncols {
        tab.t[(k, j)] = 0.0;
    }
    for j in 0..d {
        tab.t[(k, j)] = -c[j];
        tab.t[(k, d + j)] = c[j];
    }
    for i in 0..k {
        let col = tab.basis[i];
        let f = tab.t[(k, col)];
        if f != 0.0 {
            for j in 0..ncols {
                let v = tab.t[(i, j)];
                tab.t[(k, j)] -= f * v;
            }
        }
    }
    tab.run(n_struct)?;

    let mut z = DVector::zeros(d);
    for i in 0..k {
        let col = tab.basis[i];
        let v = tab.t[(i, ncols - 1)];
        if col < d {
            z[col] += v;
        } else if col < 2 * d {
            z[col - d] -= v;
        }
    }
    let value = c.dot(&z);
    Ok(LpSolution { z, value })
}
