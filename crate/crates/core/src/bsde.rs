//! Backward solvers for `Y_t = ξ + ∫_t^T f(s, Y_s, Z_s) ds - ∫_t^T Z_s dW_s`.
//!
//! Two routes are provided: a closed-form linearization for affine generators
//! (a Girsanov-weighted, discounted conditional expectation) and a
//! least-squares Monte Carlo recursion for general generators.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{Matrix, PathEnsemble, TimeGrid};
use crate::regression::{conditional_regress, PolynomialBasis, RegressionFit, RegressionState};
use crate::scalar::Scalar;

/// A coefficient process sampled on the grid.
#[derive(Debug, Clone)]
pub enum Coeff<S> {
    Constant(S),
    /// One value per grid time.
    PerTime(Vec<S>),
    /// One value per path and grid time.
    PerPath(Matrix<S>),
}

impl<S: Scalar> Coeff<S> {
    pub fn zero() -> Self {
        Coeff::Constant(S::zero())
    }

    #[inline]
    pub fn at(&self, p: usize, i: usize) -> S {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::PerTime(v) => v[i],
            Coeff::PerPath(m) => m.get(p, i),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Coeff::PerPath(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coeff::Constant(c) => *c == S::zero(),
            Coeff::PerTime(v) => v.iter().all(|x| *x == S::zero()),
            Coeff::PerPath(m) => m.as_slice().iter().all(|x| *x == S::zero()),
        }
    }

    fn check(&self, name: &str, n_paths: usize, n_points: usize) -> Result<()> {
        let ok = match self {
            Coeff::Constant(c) => c.is_finite(),
            Coeff::PerTime(v) => v.len() == n_points,
            Coeff::PerPath(m) => m.rows() == n_paths && m.cols() == n_points,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("coefficient {name} does not conform to the grid")))
        }
    }
}

/// Generator `f(t, y, z) = λ_t + μ_t y + ν_t z`.
#[derive(Debug, Clone)]
pub struct AffineCoeffs<S> {
    pub lambda: Coeff<S>,
    pub mu: Coeff<S>,
    pub nu: Coeff<S>,
}

impl<S: Scalar> AffineCoeffs<S> {
    pub fn new(lambda: Coeff<S>, mu: Coeff<S>, nu: Coeff<S>) -> Self {
        Self { lambda, mu, nu }
    }

    pub fn constant(lambda: S, mu: S, nu: S) -> Self {
        Self::new(Coeff::Constant(lambda), Coeff::Constant(mu), Coeff::Constant(nu))
    }

    fn check(&self, ens: &PathEnsemble<S>) -> Result<()> {
        let (n, m) = (ens.n_paths(), ens.grid().len());
        self.lambda.check("lambda", n, m)?;
        self.mu.check("mu", n, m)?;
        self.nu.check("nu", n, m)
    }
}

/// Location of a generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint<S> {
    pub path: usize,
    pub step: usize,
    pub t: S,
}

/// A BSDE generator with its partial derivatives in y and z.
pub trait Generator<S: Scalar>: Sync {
    fn value(&self, at: PathPoint<S>, y: S, z: S) -> S;
    fn dy(&self, at: PathPoint<S>, y: S, z: S) -> S;
    fn dz(&self, at: PathPoint<S>, y: S, z: S) -> S;
}

impl<S: Scalar> Generator<S> for AffineCoeffs<S> {
    fn value(&self, at: PathPoint<S>, y: S, z: S) -> S {
        let (p, i) = (at.path, at.step);
        self.lambda.at(p, i) + self.mu.at(p, i) * y + self.nu.at(p, i) * z
    }

    fn dy(&self, at: PathPoint<S>, _y: S, _z: S) -> S {
        self.mu.at(at.path, at.step)
    }

    fn dz(&self, at: PathPoint<S>, _y: S, _z: S) -> S {
        self.nu.at(at.path, at.step)
    }
}

/// Generator assembled from three closures.
pub struct FnGenerator<F, Fy, Fz> {
    pub f: F,
    pub f_y: Fy,
    pub f_z: Fz,
}

impl<S, F, Fy, Fz> Generator<S> for FnGenerator<F, Fy, Fz>
where
    S: Scalar,
    F: Fn(PathPoint<S>, S, S) -> S + Sync,
    Fy: Fn(PathPoint<S>, S, S) -> S + Sync,
    Fz: Fn(PathPoint<S>, S, S) -> S + Sync,
{
    fn value(&self, at: PathPoint<S>, y: S, z: S) -> S {
        (self.f)(at, y, z)
    }

    fn dy(&self, at: PathPoint<S>, y: S, z: S) -> S {
        (self.f_y)(at, y, z)
    }

    fn dz(&self, at: PathPoint<S>, y: S, z: S) -> S {
        (self.f_z)(at, y, z)
    }
}

/// Largest discrepancy between the supplied partials of `gen` and central
/// finite differences, over the given evaluation points.
pub fn partials_mismatch<S: Scalar, G: Generator<S>>(gen: &G, points: &[(PathPoint<S>, S, S)], h: S) -> S {
    let two_h = h + h;
    points
        .iter()
        .map(|&(at, y, z)| {
            let fd_y = (gen.value(at, y + h, z) - gen.value(at, y - h, z)) / two_h;
            let fd_z = (gen.value(at, y, z + h) - gen.value(at, y, z - h)) / two_h;
            (fd_y - gen.dy(at, y, z)).abs().max((fd_z - gen.dz(at, y, z)).abs())
        })
        .fold(S::zero(), |a, b| a.max(b))
}

/// Regression settings shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub basis: PolynomialBasis,
    /// Fixed-point iterations for the implicit Y update; 1 is the explicit scheme.
    pub n_picard: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { basis: PolynomialBasis::default(), n_picard: 1 }
    }
}

/// Per-path, per-time solution of a BSDE.
#[derive(Debug, Clone)]
pub struct BsdeSolution<S> {
    pub grid: TimeGrid<S>,
    /// `n_paths × (n_steps + 1)`.
    pub y: Matrix<S>,
    /// `n_paths × n_steps`; column `i` is `Z_{t_i}`.
    pub z: Matrix<S>,
    pub y0: S,
    /// Standard error of `y0`, from the spread of its per-path estimator.
    pub y0_stderr: S,
    /// Regression standard error of the fitted `Y` at every grid time (zero at T).
    pub y_slice_se: Vec<S>,
    /// Regression standard error of the fitted `Z` at every step.
    pub z_slice_se: Vec<S>,
}

/// One row of the exported solution summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow<S> {
    pub t: S,
    pub mean_y: S,
    pub se_y: S,
    pub mean_z: S,
    pub se_z: S,
}

pub(crate) fn mean_and_se<S: Scalar>(v: &[S]) -> (S, S) {
    let n = S::of_usize(v.len());
    let mean = v.iter().copied().sum::<S>() / n;
    let var = v.iter().map(|x| (*x - mean) * (*x - mean)).sum::<S>() / n;
    (mean, (var / n).sqrt())
}

impl<S: Scalar> BsdeSolution<S> {
    pub fn n_paths(&self) -> usize {
        self.y.rows()
    }

    /// `Y_{t_i}` across paths.
    pub fn y_at(&self, i: usize) -> Vec<S> {
        self.y.column(i)
    }

    /// Mean and standard error of `Y` and `Z` at every grid time; the last Z
    /// entry repeats the final step.
    pub fn summary(&self) -> Vec<SummaryRow<S>> {
        let n_steps = self.grid.n_steps();
        (0..=n_steps)
            .map(|i| {
                let (mean_y, se_y) = mean_and_se(&self.y.column(i));
                let (mean_z, se_z) = mean_and_se(&self.z.column(i.min(n_steps - 1)));
                SummaryRow { t: self.grid.time(i), mean_y, se_y, mean_z, se_z }
            })
            .collect()
    }

    /// Smallest Y over all paths and times, with its time index.
    pub fn min_y(&self) -> (S, usize) {
        let mut best = (S::infinity(), 0);
        for i in 0..self.grid.len() {
            for p in 0..self.n_paths() {
                let v = self.y.get(p, i);
                if v < best.0 {
                    best = (v, i);
                }
            }
        }
        best
    }
}

fn check_inputs<S: Scalar>(xi: &[S], ens: &PathEnsemble<S>, state: &RegressionState<S>) -> Result<()> {
    if xi.len() != ens.n_paths() {
        return Err(Error::ShapeMismatch(format!(
            "{} terminal values for {} paths",
            xi.len(),
            ens.n_paths()
        )));
    }
    if state.n_paths() != ens.n_paths() {
        return Err(Error::ShapeMismatch("regression state does not match the ensemble".into()));
    }
    Ok(())
}

/// Log-likelihood of `dQ/dP = E(∫ν dW)` along every path, for ratio weights
/// `dQ/dP` restricted to `[t_i, T]`.
pub(crate) struct GirsanovWeights<S> {
    loglik: Vec<S>,
    cols: usize,
    trivial: bool,
}

impl<S: Scalar> GirsanovWeights<S> {
    pub(crate) fn new(ens: &PathEnsemble<S>, nu: &Coeff<S>) -> Self {
        let cols = ens.grid().len();
        let n_steps = ens.grid().n_steps();
        let half_dt = ens.grid().dt() * S::of(0.5);
        let trivial = nu.is_zero();
        let mut loglik = vec![S::zero(); if trivial { 0 } else { ens.n_paths() * cols }];
        loglik.par_chunks_mut(cols).enumerate().for_each(|(p, ll)| {
            let w = ens.path(p);
            for i in 0..n_steps {
                let v = nu.at(p, i);
                ll[i + 1] = ll[i] + v * (w[i + 1] - w[i]) - v * v * half_dt;
            }
        });
        Self { loglik, cols, trivial }
    }

    pub(crate) fn is_trivial(&self) -> bool {
        self.trivial
    }

    /// Weights `E(∫_{t_i}^T ν dW)` per path, renormalized to unit sample mean.
    pub(crate) fn ratios(&self, n_paths: usize, i: usize) -> Result<Vec<S>> {
        if self.trivial {
            return Ok(vec![S::one(); n_paths]);
        }
        let last = self.cols - 1;
        let mut w: Vec<S> = (0..n_paths)
            .map(|p| self.loglik[p * self.cols + last] - self.loglik[p * self.cols + i])
            .collect();
        let max_log = S::max_value().ln();
        let bad = w.iter().filter(|l| !l.is_finite() || **l > max_log).count();
        if bad > 0 {
            return Err(Error::Numeric(format!(
                "Girsanov weight overflows on {bad} of {n_paths} paths at step {i}"
            )));
        }
        let top = w.iter().copied().fold(S::neg_infinity(), S::max);
        for l in w.iter_mut() {
            *l = (*l - top).exp();
        }
        let mean = w.iter().copied().sum::<S>() / S::of_usize(n_paths);
        if !(mean > S::zero()) || !mean.is_finite() {
            return Err(Error::Numeric(format!("degenerate Girsanov weights at step {i}")));
        }
        for l in w.iter_mut() {
            *l = *l / mean;
        }
        Ok(w)
    }
}

/// Output of the linearized conditional expectation.
pub(crate) struct Linearized<S> {
    pub y: Matrix<S>,
    pub y0_stderr: S,
    pub slice_se: Vec<S>,
}

/// Computes `E^Q_{t_i}[ξ e^{∫_{t_i}^T μ} + ∫_{t_i}^T λ_s e^{∫_{t_i}^s μ} ds]` for
/// `i ≥ from_step`, with `dQ/dP = E(∫ν dW)`; rows before `from_step` are zero.
///
/// Time integrals use the trapezoid rule, the stochastic exponent the
/// left-point Itô sum. Weights are handled in log space and renormalized to
/// unit sample mean at each time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linearized_expectation<S, L>(
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
    lambda: L,
    mu: &Coeff<S>,
    nu: &Coeff<S>,
    terminal: &[S],
    from_step: usize,
) -> Result<Linearized<S>>
where
    S: Scalar,
    L: Fn(usize, usize) -> S + Sync,
{
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let n_paths = ens.n_paths();
    let cols = grid.len();
    let half_dt = grid.dt() * S::of(0.5);

    // discounted payoff X_i, path by path
    let mut payoff = vec![S::zero(); n_paths * cols];
    payoff.par_chunks_mut(cols).enumerate().for_each(|(p, x)| {
        x[n_steps] = terminal[p];
        for i in (from_step..n_steps).rev() {
            let growth = ((mu.at(p, i) + mu.at(p, i + 1)) * half_dt).exp();
            x[i] = growth * x[i + 1] + (lambda(p, i) + lambda(p, i + 1) * growth) * half_dt;
        }
    });
    let weights = GirsanovWeights::new(ens, nu);

    let mut y = Matrix::zeros(n_paths, cols);
    let mut slice_se = vec![S::zero(); cols];
    let mut y0_stderr = S::zero();
    y.set_column(n_steps, terminal);

    for i in (from_step..n_steps).rev() {
        let ratio = weights.ratios(n_paths, i)?;
        let targets: Vec<S> = (0..n_paths).map(|p| ratio[p] * payoff[p * cols + i]).collect();
        let regs = state.at(i);
        let fit = weighted_regress(&weights, &ratio, &targets, &regs, basis, i)?;
        y.set_column(i, &fit.fitted);
        slice_se[i] = fit.fitted_se;
        if i == 0 {
            y0_stderr = mean_and_se(&targets).1;
        }
    }
    Ok(Linearized { y, y0_stderr, slice_se })
}

/// `E_i[ratio · x] / E_i[ratio]`, both regressed on the same state.
///
/// The true conditional mean of the weight is 1; dividing by its regression
/// removes the noise the weights add, so that a deterministic `x` comes back
/// exactly. The denominator is clamped to the range of the weights, hence
/// positive.
pub(crate) fn weighted_regress<S: Scalar>(
    weights: &GirsanovWeights<S>,
    ratio: &[S],
    targets: &[S],
    regs: &[Vec<S>],
    basis: PolynomialBasis,
    step: usize,
) -> Result<RegressionFit<S>> {
    let mut fit = conditional_regress(targets, regs, basis, step)?;
    if weights.is_trivial() {
        return Ok(fit);
    }
    let norm = conditional_regress(ratio, regs, basis, step)?;
    for (f, d) in fit.fitted.iter_mut().zip(&norm.fitted) {
        *f = *f / *d;
    }
    Ok(fit)
}

/// `Z_{t_i} = E_i[(Y_{t_{i+1}} - E_i[Y_{t_{i+1}}]) ΔW_i] / dt` for every step.
pub(crate) fn regression_z<S: Scalar>(
    y: &Matrix<S>,
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
    from_step: usize,
) -> Result<(Matrix<S>, Vec<S>)> {
    let n_steps = ens.grid().n_steps();
    let dt = ens.grid().dt();
    let mut z = Matrix::zeros(ens.n_paths(), n_steps);
    let mut se = vec![S::zero(); n_steps];
    for i in from_step..n_steps {
        let regs = state.at(i);
        let next = y.column(i + 1);
        let cond = conditional_regress(&next, &regs, basis, i)?;
        let fit = z_step(&next, &cond.fitted, &ens.increments(i), &regs, basis, dt, i)?;
        z.set_column(i, &fit.0);
        se[i] = fit.1;
    }
    Ok((z, se))
}

fn z_step<S: Scalar>(
    next: &[S],
    cond_mean: &[S],
    dw: &[S],
    regs: &[Vec<S>],
    basis: PolynomialBasis,
    dt: S,
    step: usize,
) -> Result<(Vec<S>, S)> {
    let targets: Vec<S> = next.iter().zip(cond_mean).zip(dw).map(|((y, m), d)| (*y - *m) * *d / dt).collect();
    let fit = conditional_regress(&targets, regs, basis, step)?;
    Ok((fit.fitted, fit.fitted_se))
}

/// Closed-form solver for affine generators.
///
/// `Y_t = E^Q_t[ξ e^{∫_t^T μ} + ∫_t^T λ_s e^{∫_t^s μ} ds]` with
/// `dQ/dP = E(∫ν dW)`; conditional expectations are regressions on `state`.
/// Z comes from the one-step regression of Y on the Brownian increment.
pub fn solve_affine<S: Scalar>(
    coeffs: &AffineCoeffs<S>,
    xi: &[S],
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
) -> Result<BsdeSolution<S>> {
    check_inputs(xi, ens, state)?;
    coeffs.check(ens)?;
    let lambda = |p: usize, i: usize| coeffs.lambda.at(p, i);
    let lin = linearized_expectation(ens, state, basis, lambda, &coeffs.mu, &coeffs.nu, xi, 0)?;
    let (z, z_slice_se) = regression_z(&lin.y, ens, state, basis, 0)?;
    Ok(BsdeSolution {
        grid: ens.grid().clone(),
        y0: lin.y.get(0, 0),
        y: lin.y,
        z,
        y0_stderr: lin.y0_stderr,
        y_slice_se: lin.slice_se,
        z_slice_se,
    })
}

/// Least-squares Monte Carlo backward recursion.
///
/// At each step, `Z_{t_i}` is the regression of the centered
/// `Y_{t_{i+1}} ΔW_i / dt`, and `Y_{t_i} = E_i[Y_{t_{i+1}}] + f(t_i, Ŷ, Z_{t_i}) dt`
/// where Ŷ starts from the conditional mean and is updated `n_picard` times.
pub fn solve_lsmc<S: Scalar, G: Generator<S>>(
    gen: &G,
    xi: &[S],
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    settings: SolverSettings,
) -> Result<BsdeSolution<S>> {
    check_inputs(xi, ens, state)?;
    if settings.n_picard == 0 {
        return invalid("n_picard must be at least 1");
    }
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let n_paths = ens.n_paths();
    let dt = grid.dt();

    let mut y = Matrix::zeros(n_paths, grid.len());
    let mut z = Matrix::zeros(n_paths, n_steps);
    let mut y_slice_se = vec![S::zero(); grid.len()];
    let mut z_slice_se = vec![S::zero(); n_steps];
    let mut y0_stderr = S::zero();
    y.set_column(n_steps, xi);

    for i in (0..n_steps).rev() {
        let t = grid.time(i);
        let regs = state.at(i);
        let next = y.column(i + 1);
        let cond = conditional_regress(&next, &regs, settings.basis, i)?;
        let (zi, zse) = z_step(&next, &cond.fitted, &ens.increments(i), &regs, settings.basis, dt, i)?;

        let yi: Vec<S> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let at = PathPoint { path: p, step: i, t };
                let mut guess = cond.fitted[p];
                for _ in 0..settings.n_picard {
                    guess = cond.fitted[p] + gen.value(at, guess, zi[p]) * dt;
                }
                guess
            })
            .collect();
        if yi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite Y at step {i}")));
        }
        if i == 0 {
            let raw: Vec<S> = (0..n_paths)
                .map(|p| next[p] + gen.value(PathPoint { path: p, step: 0, t }, next[p], zi[p]) * dt)
                .collect();
            y0_stderr = mean_and_se(&raw).1;
        }
        y.set_column(i, &yi);
        z.set_column(i, &zi);
        y_slice_se[i] = cond.fitted_se;
        z_slice_se[i] = zse;
    }

    Ok(BsdeSolution { grid: grid.clone(), y0: y.get(0, 0), y, z, y0_stderr, y_slice_se, z_slice_se })
}
