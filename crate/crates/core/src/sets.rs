//! Polyhedral sets `{x : H x ≤ h}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("row {0} of H is zero")]
    ZeroRow(usize),
    #[error("polyhedron data must be finite")]
    NonFinite,
    #[error("H has {rows} rows but h has {len} entries")]
    Shape { rows: usize, len: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("lower bound exceeds upper bound in coordinate {0}")]
    EmptyBox(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron {
    h_mat: DMatrix<f64>,
    h_vec: DVector<f64>,
}

impl Polyhedron {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self, SetError> {
        if h_mat.nrows() != h_vec.len() {
            return Err(SetError::Shape {
                rows: h_mat.nrows(),
                len: h_vec.len(),
            });
        }
        if h_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(SetError::NonFinite);
        }
        if let Some(i) = (0..h_mat.nrows()).find(|&i| h_mat.row(i).iter().all(|&v| v == 0.0)) {
            return Err(SetError::ZeroRow(i));
        }
        Ok(Self { h_mat, h_vec })
    }

    /// Axis-aligned box. Infinite bounds are skipped, so unconstrained
    /// coordinates contribute no rows.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self, SetError> {
        if lower.len() != upper.len() {
            return Err(SetError::Dimension(lower.len(), upper.len()));
        }
        let dim = lower.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..dim {
            if lower[i] > upper[i] {
                return Err(SetError::EmptyBox(i));
            }
            if upper[i].is_finite() {
                rows.push((i, 1.0, upper[i]));
            }
            if lower[i].is_finite() {
                rows.push((i, -1.0, -lower[i]));
            }
        }
        let mut h_mat = DMatrix::zeros(rows.len(), dim);
        let mut h_vec = DVector::zeros(rows.len());
        for (r, (i, sign, bound)) in rows.into_iter().enumerate() {
            h_mat[(r, i)] = sign;
            h_vec[r] = bound;
        }
        Self::new(h_mat, h_vec)
    }

    /// The whole space (no rows).
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            h_mat: DMatrix::zeros(0, dim),
            h_vec: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn h_mat(&self) -> &DMatrix<f64> {
        &self.h_mat
    }

    pub fn h_vec(&self) -> &DVector<f64> {
        &self.h_vec
    }

    /// `H x − h`.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h_mat * x - &self.h_vec
    }

    /// Largest row violation `max(H x − h)`, or `-inf` when there are no rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.residual(x).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Stacks the rows of both sets.
    pub fn intersect(&self, other: &Polyhedron) -> Result<Polyhedron, SetError> {
        if self.dim() != other.dim() {
            return Err(SetError::Dimension(self.dim(), other.dim()));
        }
        let (k1, k2) = (self.n_rows(), other.n_rows());
        let mut h_mat = DMatrix::zeros(k1 + k2, self.dim());
        h_mat.rows_mut(0, k1).copy_from(&self.h_mat);
        h_mat.rows_mut(k1, k2).copy_from(&other.h_mat);
        let mut h_vec = DVector::zeros(k1 + k2);
        h_vec.rows_mut(0, k1).copy_from(&self.h_vec);
        h_vec.rows_mut(k1, k2).copy_from(&other.h_vec);
        Ok(Polyhedron { h_mat, h_vec })
    }

    /// `{x : H (M x) ≤ h}` for a linear map `M` (pre-image).
    pub fn preimage(&self, map: &DMatrix<f64>) -> Result<Polyhedron, SetError> {
        if map.nrows() != self.dim() {
            return Err(SetError::Dimension(map.nrows(), self.dim()));
        }
        Polyhedron::new(&self.h_mat * map, self.h_vec.clone())
    }

    /// Interval `[t_lo, t_hi]` such that `x + t d` stays inside. Assumes `x`
    /// is inside. Unbounded directions give infinite ends.
    pub fn chord(&self, x: &DVector<f64>, d: &DVector<f64>) -> (f64, f64) {
        let slack = &self.h_vec - &self.h_mat * x;
        let rate = &self.h_mat * d;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..slack.len() {
            let s = slack[i].max(0.0);
            if rate[i] > 1e-300 {
                hi = hi.min(s / rate[i]);
            } else if rate[i] < -1e-300 {
                lo = lo.max(s / rate[i]);
            }
        }
        (lo, hi)
    }

    /// True when every coordinate is bounded in both directions.
    pub fn is_bounded(&self) -> bool {
        (0..self.dim()).all(|i| {
            [1.0, -1.0].iter().all(|&s| {
                let mut c = DVector::zeros(self.dim());
                c[i] = s;
                !matches!(crate::qp::solve_lp(&c, self), Err(crate::qp::LpError::Unbounded))
            })
        })
    }

    /// Hit-and-run samples starting from `start` (which must be inside).
    /// Fails with `None` when the set is unbounded.
    pub fn hit_and_run<R: Rng>(
        &self,
        start: &DVector<f64>,
        n_samples: usize,
        rng: &mut R,
    ) -> Option<Vec<DVector<f64>>> {
        if !self.is_bounded() {
            return None;
        }
        let dim = self.dim();
        let mut x = start.clone();
        let mut out = Vec::with_capacity(n_samples);
        while out.len() < n_samples {
            let mut d = DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let norm = d.norm();
            if norm < 1e-6 || norm > 1.0 {
                continue;
            }
            d /= norm;
            let (lo, hi) = self.chord(&x, &d);
            if !lo.is_finite() || !hi.is_finite() {
                return None;
            }
            let t = lo + (hi - lo) * rng.gen::<f64>();
            x += d * t;
            out.push(x.clone());
        }
        Some(out)
    }
}

#[derive(Serialize, Deserialize)]
struct PolyhedronRepr {
    #[serde(rename = "H")]
    h_mat: Vec<Vec<f64>>,
    h: Vec<f64>,
}

impl Serialize for Polyhedron {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let h_mat = (0..self.n_rows())
            .map(|i| self.h_mat.row(i).iter().copied().collect())
            .collect();
        PolyhedronRepr {
            h_mat,
            h: self.h_vec.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polyhedron {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = PolyhedronRepr::deserialize(d)?;
        let rows = repr.h_mat.len();
        let cols = repr.h_mat.first().map_or(0, Vec::len);
        if repr.h_mat.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged H matrix"));
        }
        let h_mat = DMatrix::from_fn(rows, cols, |i, j| repr.h_mat[i][j]);
        Polyhedron::new(h_mat, DVector::from_vec(repr.h)).map_err(D::Error::custom)
    }
}
