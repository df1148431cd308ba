//! Time grids, path matrices and Cameron–Martin directions.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix, one row per path.
#[derive(Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from `rows` closures evaluated column by column.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` (one value per path).
    pub fn column(&self, c: usize) -> Vec<S> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[S]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

impl<S> fmt::Debug for Matrix<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

/// Uniform discretization `0 = t_0 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    n_steps: usize,
    times: Vec<S>,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(horizon: S, n_steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return invalid(format!("horizon must be positive and finite, got {horizon}"));
        }
        if n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        let n = S::of_usize(n_steps);
        let mut times: Vec<S> = (0..=n_steps).map(|i| horizon * S::of_usize(i) / n).collect();
        times[n_steps] = horizon;
        Ok(Self { horizon, n_steps, times })
    }

    #[inline]
    pub fn horizon(&self) -> S {
        self.horizon
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    #[inline]
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn dt(&self) -> S {
        self.horizon / S::of_usize(self.n_steps)
    }

    #[inline]
    pub fn times(&self) -> &[S] {
        &self.times
    }

    #[inline]
    pub fn time(&self, i: usize) -> S {
        self.times[i]
    }

    /// Index of the grid point equal to `t` (up to rounding).
    pub fn index_of(&self, t: S) -> Result<usize> {
        if t < S::zero() || t > self.horizon * (S::one() + S::of(1e-12)) {
            return invalid(format!("time {t} lies outside [0, {}]", self.horizon));
        }
        let x = t / self.dt();
        let i = x.round();
        if (x - i).abs() > S::of(1e-6) {
            return invalid(format!("time {t} is not a grid point (dt = {})", self.dt()));
        }
        Ok(i.to_usize().unwrap_or(0).min(self.n_steps))
    }

    /// Trapezoid integral of grid values over `[0, T]`.
    pub fn integrate(&self, values: &[S]) -> S {
        debug_assert_eq!(values.len(), self.len());
        let inner: S = values[1..self.n_steps].iter().copied().sum();
        self.dt() * (inner + (values[0] + values[self.n_steps]) * S::of(0.5))
    }

    /// Trapezoid integral over `[u, T]`; the value at `u` is linearly interpolated.
    pub fn integrate_from(&self, values: &[S], u: S) -> S {
        let dt = self.dt();
        let pos = (u / dt).max(S::zero());
        let k = pos.floor().to_usize().unwrap_or(0).min(self.n_steps);
        if k >= self.n_steps {
            return S::zero();
        }
        let frac = pos - S::of_usize(k);
        let v_u = values[k] + (values[k + 1] - values[k]) * frac;
        let mut total = (v_u + values[k + 1]) * S::of(0.5) * (S::one() - frac) * dt;
        for i in (k + 1)..self.n_steps {
            total = total + (values[i] + values[i + 1]) * S::of(0.5) * dt;
        }
        total
    }

    /// Running trapezoid integrals `∫_0^{t_i}` for every grid point.
    pub fn cumulative_integral(&self, values: &[S]) -> Vec<S> {
        let half_dt = self.dt() * S::of(0.5);
        let mut out = Vec::with_capacity(self.len());
        let mut acc = S::zero();
        out.push(acc);
        for i in 0..self.n_steps {
            acc = acc + (values[i] + values[i + 1]) * half_dt;
            out.push(acc);
        }
        out
    }

    /// Trapezoid integrals `∫_{t_i}^T` for every grid point.
    pub fn tail_integrals(&self, values: &[S]) -> Vec<S> {
        let half_dt = self.dt() * S::of(0.5);
        let mut out = vec![S::zero(); self.len()];
        for i in (0..self.n_steps).rev() {
            out[i] = out[i + 1] + (values[i] + values[i + 1]) * half_dt;
        }
        out
    }

    pub(crate) fn check_same(&self, other: &TimeGrid<S>) -> Result<()> {
        if self.n_steps != other.n_steps || self.horizon != other.horizon {
            return Err(Error::ShapeMismatch(format!(
                "grid (T={}, n={}) does not match grid (T={}, n={})",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )));
        }
        Ok(())
    }
}

/// Brownian paths sampled on a grid, `w[p][0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble<S> {
    grid: TimeGrid<S>,
    w: Matrix<S>,
    master_seed: u64,
}

impl<S: Scalar> PathEnsemble<S> {
    /// Wraps an explicit path matrix (one row per path, `n_steps + 1` columns).
    pub fn from_paths(grid: TimeGrid<S>, w: Matrix<S>, master_seed: u64) -> Result<Self> {
        if w.cols() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "paths have {} columns, grid has {} points",
                w.cols(),
                grid.len()
            )));
        }
        if w.rows() == 0 {
            return invalid("an ensemble needs at least one path");
        }
        Ok(Self { grid, w, master_seed })
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    #[inline]
    pub fn path(&self, p: usize) -> &[S] {
        self.w.row(p)
    }

    #[inline]
    pub fn paths(&self) -> &Matrix<S> {
        &self.w
    }

    /// Brownian increment `W_{t_{i+1}} - W_{t_i}` on path `p`.
    #[inline]
    pub fn increment(&self, p: usize, i: usize) -> S {
        let row = self.w.row(p);
        row[i + 1] - row[i]
    }

    /// Values `W_{t_i}` across all paths.
    pub fn slice(&self, i: usize) -> Vec<S> {
        self.w.column(i)
    }

    /// Increments over step `i` across all paths.
    pub fn increments(&self, i: usize) -> Vec<S> {
        (0..self.n_paths()).map(|p| self.increment(p, i)).collect()
    }

    pub(crate) fn map_paths(&self, f: impl Fn(usize, &mut [S])) -> Self {
        let mut w = self.w.clone();
        for p in 0..w.rows() {
            f(p, w.row_mut(p));
        }
        Self { grid: self.grid.clone(), w, master_seed: self.master_seed }
    }
}

type DirectionFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

#[derive(Clone)]
enum Density<S> {
    Constant(S),
    IndicatorUntil(S),
    General(DirectionFn<S>),
}

/// A Cameron–Martin direction `h(t) = ∫_0^t ḣ(s) ds`, given by its density ḣ.
#[derive(Clone)]
pub struct CameronMartinDirection<S> {
    hdot: Density<S>,
}

impl<S: Scalar> CameronMartinDirection<S> {
    /// Accepts ḣ after checking that `∫_0^T ḣ² ds` is finite on `grid`.
    pub fn new(hdot: impl Fn(S) -> S + Send + Sync + 'static, grid: &TimeGrid<S>) -> Result<Self> {
        let squares: Vec<S> = grid.times().iter().map(|&t| hdot(t).powi(2)).collect();
        let energy = grid.integrate(&squares);
        if !energy.is_finite() {
            return invalid("direction is not square integrable on the grid");
        }
        Ok(Self { hdot: Density::General(Arc::new(hdot)) })
    }

    /// ḣ ≡ c.
    pub fn constant(c: S) -> Self {
        Self { hdot: Density::Constant(c) }
    }

    /// ḣ = 1 on `[0, cutoff]` and 0 afterwards.
    pub fn indicator_until(cutoff: S) -> Self {
        Self { hdot: Density::IndicatorUntil(cutoff) }
    }

    pub fn density(&self, t: S) -> S {
        match &self.hdot {
            Density::Constant(c) => *c,
            Density::IndicatorUntil(cut) => {
                if t <= *cut {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Density::General(f) => f(t),
        }
    }

    /// `h(t_i)` at every grid point. Constant and indicator densities are
    /// integrated exactly, general ones by the trapezoid rule.
    pub fn primitive_on(&self, grid: &TimeGrid<S>) -> Vec<S> {
        match &self.hdot {
            Density::Constant(c) => grid.times().iter().map(|&t| *c * t).collect(),
            Density::IndicatorUntil(cut) => grid.times().iter().map(|&t| t.min(*cut)).collect(),
            Density::General(_) => {
                let values: Vec<S> = grid.times().iter().map(|&t| self.density(t)).collect();
                grid.cumulative_integral(&values)
            }
        }
    }
}

impl<S> fmt::Debug for CameronMartinDirection<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CameronMartinDirection")
    }
}
