//! Least-squares estimation of conditional expectations on polynomial bases.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Matrix, PathEnsemble};
use crate::scalar::{tiny, Scalar};
use crate::terminal::TerminalSpec;

/// Fixed-size path blocks for the reductions; the partial sums are combined in
/// block order so results do not depend on the number of worker threads.
const BLOCK: usize = 4096;

/// Total-degree polynomial basis in the standardized state variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolynomialBasis {
    pub degree: usize,
}

impl Default for PolynomialBasis {
    fn default() -> Self {
        Self { degree: 3 }
    }
}

impl PolynomialBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    /// Exponent tuples of every monomial of total degree ≤ `degree` in `dim` variables.
    pub fn exponents(&self, dim: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; dim]];
        if dim == 0 {
            return out;
        }
        for total in 1..=self.degree {
            let mut current = vec![0; dim];
            push_compositions(total, 0, &mut current, &mut out);
        }
        out
    }

    /// Number of basis functions in `dim` variables.
    pub fn size(&self, dim: usize) -> usize {
        self.exponents(dim).len()
    }
}

fn push_compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        push_compositions(remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Result of one conditional-expectation regression.
#[derive(Debug, Clone)]
pub struct RegressionFit<S> {
    pub fitted: Vec<S>,
    pub coefficients: Vec<S>,
    /// Residual standard deviation.
    pub residual_sd: S,
    /// Typical standard error of a fitted value, `residual_sd · √(k/n)`.
    pub fitted_se: S,
}

/// Regresses `values` on polynomials of the state variables and returns the
/// fitted values (one per path).
///
/// The state variables are standardized and orthogonalized first. Variables
/// that are constant across paths (for instance `W_0`) or linear combinations
/// of earlier ones are dropped, so a regression at time zero reduces to the
/// sample mean. Fitted values are clipped to the sample range of `values`,
/// which is where any conditional expectation lies. The `step` label is only
/// used in error messages.
pub fn conditional_regress<S: Scalar>(
    values: &[S],
    state: &[Vec<S>],
    basis: PolynomialBasis,
    step: usize,
) -> Result<RegressionFit<S>> {
    let n = values.len();
    for (j, col) in state.iter().enumerate() {
        if col.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "state variable {j} has {} values, expected {n}",
                col.len()
            )));
        }
    }

    // standardize, then orthogonalize against the variables already kept;
    // constant or linearly redundant variables carry no information
    let mut standardized: Vec<Vec<S>> = Vec::with_capacity(state.len());
    for col in state {
        let mean = col.iter().copied().sum::<S>() / S::of_usize(n);
        let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / S::of_usize(n);
        let sd = var.sqrt();
        if sd <= tiny::<S>() * mean.abs().max(S::one()) {
            continue;
        }
        let mut v: Vec<S> = col.iter().map(|&x| (x - mean) / sd).collect();
        for kept in &standardized {
            let proj = v.iter().zip(kept).map(|(a, b)| *a * *b).sum::<S>() / S::of_usize(n);
            for (a, b) in v.iter_mut().zip(kept) {
                *a = *a - proj * *b;
            }
        }
        let rest = (v.iter().map(|a| *a * *a).sum::<S>() / S::of_usize(n)).sqrt();
        if rest <= S::of(1e-6) {
            continue;
        }
        for a in v.iter_mut() {
            *a = *a / rest;
        }
        standardized.push(v);
    }

    let exps = basis.exponents(standardized.len());
    let k = exps.len();
    if n <= k {
        return Err(Error::SingularRegression {
            step,
            reason: format!("{n} samples cannot identify {k} basis functions"),
        });
    }

    let eval_row = |p: usize, row: &mut [S]| {
        for (slot, e) in row.iter_mut().zip(&exps) {
            let mut v = S::one();
            for (var, &power) in standardized.iter().zip(e) {
                if power > 0 {
                    v = v * var[p].powi(power as i32);
                }
            }
            *slot = v;
        }
    };

    // normal equations, accumulated block by block
    let partials: Vec<(Vec<S>, Vec<S>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut gram = vec![S::zero(); k * k];
            let mut rhs = vec![S::zero(); k];
            let mut row = vec![S::zero(); k];
            for p in (b * BLOCK)..((b + 1) * BLOCK).min(n) {
                eval_row(p, &mut row);
                for i in 0..k {
                    rhs[i] = rhs[i] + row[i] * values[p];
                    for j in 0..=i {
                        gram[i * k + j] = gram[i * k + j] + row[i] * row[j];
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![S::zero(); k * k];
    let mut rhs = vec![S::zero(); k];
    for (g, r) in &partials {
        for i in 0..k * k {
            gram[i] = gram[i] + g[i];
        }
        for i in 0..k {
            rhs[i] = rhs[i] + r[i];
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[j * k + i] = gram[i * k + j];
        }
    }

    let chol = cholesky(&gram, k).map_err(|reason| Error::SingularRegression { step, reason })?;
    let coefficients = cholesky_solve(&chol, k, &rhs);

    let mut fitted = vec![S::zero(); n];
    fitted.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
        let mut row = vec![S::zero(); k];
        for (off, slot) in chunk.iter_mut().enumerate() {
            eval_row(b * BLOCK + off, &mut row);
            *slot = row.iter().zip(&coefficients).map(|(x, c)| *x * *c).sum();
        }
    });

    // a conditional expectation lies within the range of its target
    let lo = values.iter().copied().fold(S::infinity(), S::min);
    let hi = values.iter().copied().fold(S::neg_infinity(), S::max);
    for f in fitted.iter_mut() {
        *f = f.max(lo).min(hi);
    }

    let rss: S = fitted.iter().zip(values).map(|(f, v)| (*v - *f) * (*v - *f)).sum();
    let residual_sd = (rss / S::of_usize(n - k)).sqrt();
    let fitted_se = residual_sd * (S::of_usize(k) / S::of_usize(n)).sqrt();
    Ok(RegressionFit { fitted, coefficients, residual_sd, fitted_se })
}

/// Lower Cholesky factor of a symmetric positive definite `k×k` matrix.
fn cholesky<S: Scalar>(a: &[S], k: usize) -> std::result::Result<Vec<S>, String> {
    let mut l = vec![S::zero(); k * k];
    let tol = S::epsilon() * S::of(1e4);
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for m in 0..j {
                sum = sum - l[i * k + m] * l[j * k + m];
            }
            if i == j {
                let scale = a[i * k + i].abs().max(S::min_positive_value());
                if !(sum > tol * scale) {
                    return Err(format!("normal equations are rank deficient (pivot {i})"));
                }
                l[i * k + i] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve<S: Scalar>(l: &[S], k: usize, b: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); k];
    for i in 0..k {
        let mut s = b[i];
        for m in 0..i {
            s = s - l[i * k + m] * y[m];
        }
        y[i] = s / l[i * k + i];
    }
    let mut x = vec![S::zero(); k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for m in (i + 1)..k {
            s = s - l[m * k + i] * x[m];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

/// State variables observed at every grid time, used as regressors.
#[derive(Debug, Clone)]
pub struct RegressionState<S> {
    features: Vec<Matrix<S>>,
    /// First grid index at which each feature enters the regression.
    first_step: Vec<usize>,
}

impl<S: Scalar> RegressionState<S> {
    /// Only `W_t`.
    pub fn brownian(ens: &PathEnsemble<S>) -> Self {
        Self { features: vec![ens.paths().clone()], first_step: vec![0] }
    }

    /// `W_t` plus the running statistic the claim depends on.
    ///
    /// Up to the first grid step the statistic is a function of `W_{t_1}`
    /// alone, and polynomials in both would be collinear, so it enters from
    /// the second step on.
    pub fn for_terminal(spec: &TerminalSpec<S>, ens: &PathEnsemble<S>) -> Self {
        let mut state = Self::brownian(ens);
        let grid = ens.grid();
        let rows: Vec<Option<Vec<S>>> = (0..ens.n_paths())
            .into_par_iter()
            .map(|p| spec.running_statistic(grid, ens.path(p)))
            .collect();
        if rows.first().is_some_and(|r| r.is_some()) {
            let mut m = Matrix::zeros(ens.n_paths(), grid.len());
            for (p, row) in rows.into_iter().enumerate() {
                m.row_mut(p).copy_from_slice(&row.unwrap_or_default());
            }
            state.features.push(m);
            state.first_step.push(2);
        }
        state
    }

    /// Adds one more path-by-time feature matrix.
    pub fn with_feature(self, feature: Matrix<S>) -> Result<Self> {
        self.with_feature_from(feature, 0)
    }

    /// Adds a feature that is only used from grid index `first_step` on.
    pub fn with_feature_from(mut self, feature: Matrix<S>, first_step: usize) -> Result<Self> {
        if let Some(first) = self.features.first() {
            if first.rows() != feature.rows() || first.cols() != feature.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "feature is {}x{}, state is {}x{}",
                    feature.rows(),
                    feature.cols(),
                    first.rows(),
                    first.cols()
                )));
            }
        }
        self.features.push(feature);
        self.first_step.push(first_step);
        Ok(self)
    }

    pub fn dimension(&self) -> usize {
        self.features.len()
    }

    pub fn n_paths(&self) -> usize {
        self.features.first().map_or(0, |m| m.rows())
    }

    /// Regressors at grid index `i`.
    pub fn at(&self, i: usize) -> Vec<Vec<S>> {
        self.features
            .iter()
            .zip(&self.first_step)
            .filter(|(_, &first)| i >= first)
            .map(|(m, _)| m.column(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::sde::simulate_brownian;
    use approx::assert_relative_eq;

    #[test]
    fn basis_sizes() {
        let b = PolynomialBasis::new(3);
        assert_eq!(b.size(0), 1);
        assert_eq!(b.size(1), 4);
        assert_eq!(b.size(2), 10);
        assert_eq!(b.size(3), 20);
        let e = b.exponents(2);
        assert!(e.iter().all(|x| x.iter().sum::<usize>() <= 3));
    }

    fn sample_state(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.3).collect()
    }

    #[test]
    fn in_span_target_is_reproduced() {
        let x = sample_state(500);
        let fit = conditional_regress(&x, std::slice::from_ref(&x), PolynomialBasis::new(1), 0).unwrap();
        for (f, v) in fit.fitted.iter().zip(&x) {
            assert_relative_eq!(*f, *v, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_target_is_reproduced() {
        let x = sample_state(500);
        let c = vec![2.5; 500];
        let fit = conditional_regress(&c, &[x], PolynomialBasis::new(3), 0).unwrap();
        assert!(fit.fitted.iter().all(|f| (f - 2.5).abs() < 1e-10));
    }

    #[test]
    fn constant_state_reduces_to_mean() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let fit = conditional_regress(&v, &[vec![0.0; 100]], PolynomialBasis::new(3), 0).unwrap();
        assert!(fit.fitted.iter().all(|f| (f - 49.5).abs() < 1e-10));
    }

    #[test]
    fn collinear_state_is_reduced() {
        let x = sample_state(200);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let target: Vec<f64> = x.iter().map(|v| v * v).collect();
        let both = conditional_regress(&target, &[x.clone(), y], PolynomialBasis::new(2), 0).unwrap();
        let one = conditional_regress(&target, std::slice::from_ref(&x), PolynomialBasis::new(2), 0).unwrap();
        for (a, b) in both.fitted.iter().zip(&one.fitted) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn polynomially_degenerate_state_is_singular() {
        // two distinct values cannot identify a cubic
        let x: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let err = conditional_regress(&x, std::slice::from_ref(&x), PolynomialBasis::new(3), 17).unwrap_err();
        assert!(matches!(err, Error::SingularRegression { step: 17, .. }));
    }

    #[test]
    fn too_few_samples() {
        let x = sample_state(3);
        assert!(conditional_regress(&x, std::slice::from_ref(&x), PolynomialBasis::new(3), 0).is_err());
    }

    #[test]
    fn brownian_tower_property() {
        // E[W_T | W_t] = W_t
        let n = 100_000;
        let g = TimeGrid::new(1.0_f64, 4).unwrap();
        let ens = simulate_brownian(&g, n, 12).unwrap();
        let fit = conditional_regress(&ens.slice(4), &[ens.slice(2)], PolynomialBasis::new(3), 2).unwrap();
        let wt = ens.slice(2);
        let rmse = (fit.fitted.iter().zip(&wt).map(|(f, w)| (f - w).powi(2)).sum::<f64>() / n as f64).sqrt();
        // residual sd is √(T - t); the fitted error is of order √(k/n) of it
        assert!(rmse < 3.0 * fit.fitted_se, "rmse {rmse}, se {}", fit.fitted_se);
    }
}
