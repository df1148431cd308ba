//! Malliavin derivatives of BSDE solutions, Nourdin–Viens densities and the
//! Gaussian density bounds of the gene model.

use crate::bsde::{linearized_expectation, regression_z, AffineCoeffs, BsdeSolution, Coeff};
use crate::error::{invalid, Error, Result};
use crate::grid::{CameronMartinDirection, Matrix, PathEnsemble};
use crate::regression::{PolynomialBasis, RegressionState};
use crate::scalar::Scalar;
use crate::sde::shift_paths;

/// Malliavin derivatives of the generator coefficients, `D_u λ`, `D_u μ`, `D_u ν`.
#[derive(Debug, Clone)]
pub struct DerivCoeffs<S> {
    pub d_lambda: Coeff<S>,
    pub d_mu: Coeff<S>,
    pub d_nu: Coeff<S>,
}

impl<S: Scalar> DerivCoeffs<S> {
    /// Deterministic coefficients have vanishing derivatives.
    pub fn zero() -> Self {
        Self { d_lambda: Coeff::zero(), d_mu: Coeff::zero(), d_nu: Coeff::zero() }
    }
}

/// `D_u Y_t` and `D_u Z_t` for one differentiation time `u`.
#[derive(Debug, Clone)]
pub struct MalliavinSlice<S> {
    pub u: S,
    pub u_index: usize,
    /// `n_paths × (n_steps + 1)`, zero for `t_i < u`.
    pub dy: Matrix<S>,
    /// `n_paths × n_steps`, zero for `t_i < u`.
    pub dz: Matrix<S>,
    pub dy_slice_se: Vec<S>,
}

fn check_base<S: Scalar>(base: &BsdeSolution<S>, ens: &PathEnsemble<S>, per_path: &[S]) -> Result<()> {
    base.grid.check_same(ens.grid())?;
    if base.n_paths() != ens.n_paths() || per_path.len() != ens.n_paths() {
        return Err(Error::ShapeMismatch(format!(
            "base solution has {} paths, ensemble {}, derivative data {}",
            base.n_paths(),
            ens.n_paths(),
            per_path.len()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn affine_derivative<S: Scalar>(
    coeffs: &AffineCoeffs<S>,
    base: &BsdeSolution<S>,
    dxi: &[S],
    dcoeffs: &DerivCoeffs<S>,
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
    from_step: usize,
) -> Result<(Matrix<S>, Matrix<S>, Vec<S>)> {
    check_base(base, ens, dxi)?;
    let last_z = ens.grid().n_steps() - 1;
    let source = |p: usize, i: usize| {
        dcoeffs.d_lambda.at(p, i)
            + dcoeffs.d_mu.at(p, i) * base.y.get(p, i)
            + dcoeffs.d_nu.at(p, i) * base.z.get(p, i.min(last_z))
    };
    let lin = linearized_expectation(ens, state, basis, source, &coeffs.mu, &coeffs.nu, dxi, from_step)?;
    let (dz, _) = regression_z(&lin.y, ens, state, basis, from_step)?;
    Ok((lin.y, dz, lin.slice_se))
}

/// Solves the linear BSDE satisfied by `D_u Y`:
/// `D_u Y_t = D_u ξ + ∫_t^T (D_uλ + D_uμ Y + D_uν Z + μ D_u Y + ν D_u Z) ds - ∫_t^T D_u Z dW`
/// in closed form, as a Girsanov-weighted discounted conditional expectation.
#[allow(clippy::too_many_arguments)]
pub fn derivative_bsde_affine<S: Scalar>(
    coeffs: &AffineCoeffs<S>,
    base: &BsdeSolution<S>,
    dxi: &[S],
    dcoeffs: &DerivCoeffs<S>,
    u: S,
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
) -> Result<MalliavinSlice<S>> {
    let u_index = ens.grid().index_of(u)?;
    let (dy, dz, dy_slice_se) = affine_derivative(coeffs, base, dxi, dcoeffs, ens, state, basis, u_index)?;
    Ok(MalliavinSlice { u, u_index, dy, dz, dy_slice_se })
}

/// First-order response of `Y_t`, at every `t`, to the shift `W + ε h`.
///
/// Same linear BSDE as [`derivative_bsde_affine`], with terminal value
/// `∫_0^T D_u ξ ḣ(u) du` and sources integrated against ḣ likewise, but
/// without the truncation at `u ≤ t`: it is what a re-solve on the shifted
/// ensemble measures, including the effect of shifting the future noise.
pub fn linearized_sensitivity<S: Scalar>(
    coeffs: &AffineCoeffs<S>,
    base: &BsdeSolution<S>,
    directional_dxi: &[S],
    directional_dcoeffs: &DerivCoeffs<S>,
    ens: &PathEnsemble<S>,
    state: &RegressionState<S>,
    basis: PolynomialBasis,
) -> Result<Matrix<S>> {
    affine_derivative(coeffs, base, directional_dxi, directional_dcoeffs, ens, state, basis, 0).map(|r| r.0)
}

/// Per-path difference quotient `(Y_t(W + ε h) - Y_t(W)) / ε`, from two full
/// solves with identical settings.
pub fn fd_quotient<S, F>(solve: F, ens: &PathEnsemble<S>, h: &CameronMartinDirection<S>, eps: S) -> Result<Matrix<S>>
where
    S: Scalar,
    F: Fn(&PathEnsemble<S>) -> Result<BsdeSolution<S>> + Sync,
{
    if eps == S::zero() || !eps.is_finite() {
        return invalid("eps must be finite and nonzero");
    }
    let shifted = shift_paths(ens, h, eps);
    let (plain, moved) = rayon::join(|| solve(ens), || solve(&shifted));
    let (plain, moved) = (plain?, moved?);
    if plain.y.rows() != moved.y.rows() || plain.y.cols() != moved.y.cols() {
        return Err(Error::ShapeMismatch("solves returned different shapes".into()));
    }
    let data = moved.y.as_slice().iter().zip(plain.y.as_slice()).map(|(a, b)| (*a - *b) / eps).collect();
    Matrix::from_vec(plain.y.rows(), plain.y.cols(), data)
}

/// Maximum and minimum over `y` of `2Ray/(1+ay²)² - ρ`, attained at
/// `y = ±1/√(3a)`: `(±(9/8)R√(a/3) - ρ)`.
pub fn extremal_drift_constants<S: Scalar>(r: S, a: S, rho: S) -> Result<(S, S)> {
    if !(a > S::zero()) || !a.is_finite() {
        return invalid(format!("Hill scale a must be positive, got {a}"));
    }
    if !(r >= S::zero()) || !r.is_finite() {
        return invalid(format!("activation rate R must be nonnegative, got {r}"));
    }
    let peak = S::of(9.0 / 8.0) * r * (a / S::of(3.0)).sqrt();
    Ok((peak - rho, -peak - rho))
}

/// `(k_lo e^{C_lo (T-t)}, k_hi e^{C_hi (T-t)})`, the bounds on `D_u Y_t` in the
/// gene model when `k_lo ≤ D_u ξ ≤ k_hi`.
pub fn gene_derivative_bounds<S: Scalar>(r: S, a: S, rho: S, k_lo: S, k_hi: S, t: S, horizon: S) -> Result<(S, S)> {
    if !(k_lo > S::zero()) {
        return invalid(format!("k_lo must be positive, got {k_lo}"));
    }
    if k_hi < k_lo {
        return invalid("k_hi must be at least k_lo");
    }
    let (c_hi, c_lo) = extremal_drift_constants(r, a, rho)?;
    let tau = horizon - t;
    Ok((k_lo * (c_lo * tau).exp(), k_hi * (c_hi * tau).exp()))
}

/// Inputs of the Gaussian density bounds for `Y_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityBoundParams<S> {
    /// `E|Y_t - E Y_t| / 2`.
    pub c_y: S,
    pub k_lo: S,
    pub k_hi: S,
    pub c_hi: S,
    pub c_lo: S,
    pub t: S,
    pub horizon: S,
    /// `E Y_t`.
    pub mean: S,
}

impl<S: Scalar> DensityBoundParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_y >= S::zero()) {
            return invalid("C_Y must be nonnegative");
        }
        if !(self.k_lo > S::zero()) || self.k_hi < self.k_lo {
            return invalid(format!("need 0 < k_lo <= k_hi, got ({}, {})", self.k_lo, self.k_hi));
        }
        if self.c_lo > self.c_hi {
            return invalid("need C_lo <= C_hi");
        }
        if !(self.t > S::zero()) || self.t > self.horizon {
            return invalid(format!("t = {} outside (0, {}]", self.t, self.horizon));
        }
        Ok(())
    }
}

/// Lower and upper Gaussian bounds `(f_i(x), f_s(x))` on the density of `Y_t`.
pub fn gaussian_density_bounds<S: Scalar>(p: &DensityBoundParams<S>, x: S) -> (S, S) {
    let tau = p.horizon - p.t;
    let two = S::of(2.0);
    let d2 = (x - p.mean) * (x - p.mean);
    let lower = p.c_y / (p.k_hi * p.k_hi * p.t)
        * (-two * p.c_hi * tau).exp()
        * (-(-two * p.c_lo * tau).exp() * d2 / (two * p.k_lo * p.k_lo * p.t)).exp();
    let upper = p.c_y / (p.k_lo * p.k_lo * p.t)
        * (-two * p.c_lo * tau).exp()
        * (-(-two * p.c_hi * tau).exp() * d2 / (two * p.k_hi * p.k_hi * p.t)).exp();
    (lower, upper)
}

/// Bound curves `(x, f_i, f_s)` on the given points.
pub fn bound_curve<S: Scalar>(p: &DensityBoundParams<S>, xs: &[S]) -> Vec<(S, S, S)> {
    xs.iter()
        .map(|&x| {
            let (lo, hi) = gaussian_density_bounds(p, x);
            (x, lo, hi)
        })
        .collect()
}

/// `E|F - E F| / 2` from a sample.
pub fn half_mean_abs_dev<S: Scalar>(samples: &[S]) -> S {
    let n = S::of_usize(samples.len());
    let mean = samples.iter().copied().sum::<S>() / n;
    samples.iter().map(|x| (*x - mean).abs()).sum::<S>() / n / S::of(2.0)
}

/// Nourdin–Viens density of a centered variable at `x`:
/// `absdev / (2 g(x)) · exp(-∫_0^x u / g(u) du)`.
pub fn nv_density<S: Scalar>(g: impl Fn(S) -> S, absdev: S, x: S) -> Result<S> {
    let check = |u: S| -> Result<S> {
        let v = g(u);
        if v > S::zero() && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain(format!("g({u}) = {v} is not positive; no density criterion")))
        }
    };
    let gx = check(x)?;
    let tol = S::of(1e-8).max(S::epsilon() * S::of(100.0));
    let integral = adaptive_integral(&|u: S| check(u).map(|gu| u / gu), S::zero(), x, tol)?;
    Ok(absdev / (S::of(2.0) * gx) * (-integral).exp())
}

/// Adaptive trapezoid integration with Richardson extrapolation (Simpson's
/// rule on each panel), to relative tolerance `rel_tol`.
fn adaptive_integral<S: Scalar>(f: &impl Fn(S) -> Result<S>, a: S, b: S, rel_tol: S) -> Result<S> {
    if a == b {
        return Ok(S::zero());
    }
    let half = S::of(0.5);
    let (fa, fb) = (f(a)?, f(b)?);
    let m = (a + b) * half;
    let fm = f(m)?;
    let whole = (b - a) / S::of(6.0) * (fa + S::of(4.0) * fm + fb);
    let abs_tol = rel_tol * whole.abs().max(S::epsilon());
    panel(f, a, b, fa, fm, fb, whole, abs_tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn panel<S: Scalar>(f: &impl Fn(S) -> Result<S>, a: S, b: S, fa: S, fm: S, fb: S, whole: S, tol: S, depth: u32) -> Result<S> {
    let half = S::of(0.5);
    let m = (a + b) * half;
    let (lm, rm) = ((a + m) * half, (m + b) * half);
    let (flm, frm) = (f(lm)?, f(rm)?);
    let left = (m - a) / S::of(6.0) * (fa + S::of(4.0) * flm + fm);
    let right = (b - m) / S::of(6.0) * (fm + S::of(4.0) * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= S::of(15.0) * tol {
        return Ok(left + right + delta / S::of(15.0));
    }
    Ok(panel(f, a, m, fa, flm, fm, left, tol * half, depth - 1)? + panel(f, m, b, fm, frm, fb, right, tol * half, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_affine, AffineCoeffs};
    use crate::grid::TimeGrid;
    use crate::sde::simulate_brownian;
    use crate::terminal::TerminalSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid_extrema(r: f64, a: f64, rho: f64, step: f64) -> (f64, f64) {
        let n = (200.0 / step).round() as i64;
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..=n {
            let y = -100.0 + k as f64 * step;
            let v = 2.0 * r * a * y / (1.0 + a * y * y).powi(2) - rho;
            hi = hi.max(v);
            lo = lo.min(v);
        }
        (hi, lo)
    }

    #[test]
    fn extremal_constants_examples() {
        let (hi, lo) = extremal_drift_constants(1.0, 3.0, 0.0).unwrap();
        assert_relative_eq!(hi, 1.125, epsilon = 1e-15);
        assert_relative_eq!(lo, -1.125, epsilon = 1e-15);
        assert_eq!(extremal_drift_constants(0.0, 2.0, 0.3).unwrap(), (-0.3, -0.3));
        let (hi, lo) = extremal_drift_constants(1.0, 1.0, 0.001).unwrap();
        let (ghi, glo) = grid_extrema(1.0, 1.0, 0.001, 1e-4);
        assert!((hi - ghi).abs() < 1e-6 && (lo - glo).abs() < 1e-6);
        assert_relative_eq!(hi, 1.125 / 3f64.sqrt() - 0.001, epsilon = 1e-15);
        assert!(extremal_drift_constants(1.0, 0.0, 0.0).is_err());
        assert!(extremal_drift_constants(1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn derivative_bounds_examples() {
        assert_eq!(gene_derivative_bounds(1.0, 1.0, 0.001, 0.5, 2.0, 1.0, 1.0).unwrap(), (0.5, 2.0));
        let (lo, hi) = gene_derivative_bounds(0.0, 1.0, 0.2, 1.0, 3.0, 0.5, 2.0).unwrap();
        assert_relative_eq!(lo, (-0.3f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(hi, 3.0 * (-0.3f64).exp(), epsilon = 1e-15);
        let (lo, hi) = gene_derivative_bounds(1.0, 3.0, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(lo, (-1.125f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(hi, 1.125f64.exp(), epsilon = 1e-14);
        assert!(gene_derivative_bounds(1.0, 1.0, 0.0, 0.0, 1.0, 0.5, 1.0).is_err());
    }

    fn params(t: f64) -> DensityBoundParams<f64> {
        DensityBoundParams { c_y: 0.4, k_lo: 0.8, k_hi: 1.3, c_hi: 0.6, c_lo: -0.7, t, horizon: 1.0, mean: 1.2 }
    }

    #[test]
    fn gaussian_bounds_examples() {
        let p = params(0.5);
        p.validate().unwrap();
        let (_, hi) = gaussian_density_bounds(&p, p.mean);
        assert_relative_eq!(hi, 0.4 / (0.64 * 0.5) * (1.4f64 * 0.5).exp(), epsilon = 1e-14);
        for d in [0.1, 0.7, 2.5] {
            assert_eq!(gaussian_density_bounds(&p, p.mean + d), gaussian_density_bounds(&p, p.mean - d));
        }
        let q = DensityBoundParams { k_lo: 1.1, k_hi: 1.1, ..params(1.0) };
        for x in [-1.0, 0.3, 1.2, 4.0] {
            let (lo, hi) = gaussian_density_bounds(&q, x);
            let exact = 0.4 / (1.21 * 1.0) * (-(x - 1.2f64).powi(2) / (2.0 * 1.21)).exp();
            assert_relative_eq!(lo, exact, epsilon = 1e-14);
            assert_relative_eq!(hi, exact, epsilon = 1e-14);
        }
    }

    #[test]
    fn bound_params_are_validated() {
        assert!(DensityBoundParams { k_lo: 0.0, ..params(0.5) }.validate().is_err());
        assert!(DensityBoundParams { k_hi: 0.1, ..params(0.5) }.validate().is_err());
        assert!(DensityBoundParams { c_lo: 1.0, ..params(0.5) }.validate().is_err());
        assert!(params(0.0).validate().is_err());
    }

    #[test]
    fn nv_gaussian_closed_form() {
        for sigma2 in [0.25, 1.0, 3.0] {
            let sigma: f64 = f64::sqrt(sigma2);
            let absdev = sigma * (2.0 / PI).sqrt();
            for k in 0..=40 {
                let x = -4.0 * sigma + k as f64 * 0.2 * sigma;
                let rho = nv_density(|_| sigma2, absdev, x).unwrap();
                let exact = (-x * x / (2.0 * sigma2)).exp() / (2.0 * PI * sigma2).sqrt();
                assert_relative_eq!(rho, exact, max_relative = 1e-8);
            }
        }
        assert_relative_eq!(nv_density(|_| 2.0, 0.6, 0.0).unwrap(), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn nv_density_integrates_to_one() {
        let sigma2: f64 = 1.7;
        let absdev = (sigma2 * 2.0 / PI).sqrt();
        let h = 1e-3;
        let total: f64 = (-20_000..=20_000)
            .map(|k| nv_density(|_| sigma2, absdev, k as f64 * h).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn nv_density_sandwich() {
        let g = |u: f64| 1.0 + 0.5 * (3.0 * u).sin();
        let (g_lo, g_hi) = (0.5, 1.5);
        let absdev = 0.7;
        let p = DensityBoundParams {
            c_y: absdev / 2.0,
            k_lo: f64::sqrt(g_lo),
            k_hi: f64::sqrt(g_hi),
            c_hi: 0.0,
            c_lo: 0.0,
            t: 1.0,
            horizon: 1.0,
            mean: 0.0,
        };
        for k in -30..=30 {
            let x = k as f64 * 0.1;
            let rho = nv_density(g, absdev, x).unwrap();
            let (lo, hi) = gaussian_density_bounds(&p, x);
            assert!(lo <= rho * (1.0 + 1e-12) && rho <= hi * (1.0 + 1e-12), "x={x}: {lo} {rho} {hi}");
        }
    }

    #[test]
    fn nv_density_rejects_nonpositive_g() {
        assert!(matches!(nv_density(|u: f64| 1.0 - u, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(nv_density(|_| 0.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    fn ensemble(n: usize, steps: usize, seed: u64) -> PathEnsemble<f64> {
        simulate_brownian(&TimeGrid::new(1.0, steps).unwrap(), n, seed).unwrap()
    }

    #[test]
    fn derivative_of_brownian_claim() {
        let ens = ensemble(2_000, 20, 11);
        let state = RegressionState::brownian(&ens);
        let basis = PolynomialBasis::default();
        let xi = ens.slice(20);
        let zero = AffineCoeffs::constant(0.0, 0.0, 0.0);
        let base = solve_affine(&zero, &xi, &ens, &state, basis).unwrap();
        let slice = derivative_bsde_affine(&zero, &base, &vec![1.0; 2_000], &DerivCoeffs::zero(), 0.25, &ens, &state, basis).unwrap();
        assert_eq!(slice.u_index, 5);
        for i in 0..=20 {
            let expected = if i >= 5 { 1.0 } else { 0.0 };
            assert!(slice.dy.column(i).iter().all(|v| (v - expected).abs() < 1e-12));
        }
        assert!(slice.dz.as_slice().iter().all(|v| v.abs() < 1e-10));

        let disc = AffineCoeffs::constant(0.0, -0.3, 0.0);
        let base = solve_affine(&disc, &vec![2.0; 2_000], &ens, &state, basis).unwrap();
        let slice = derivative_bsde_affine(&disc, &base, &vec![0.0; 2_000], &DerivCoeffs::zero(), 0.5, &ens, &state, basis).unwrap();
        assert!(slice.dy.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn derivative_rejects_mismatched_base() {
        let ens = ensemble(100, 10, 12);
        let other = ensemble(100, 20, 12);
        let state = RegressionState::brownian(&ens);
        let zero = AffineCoeffs::constant(0.0, 0.0, 0.0);
        let base = solve_affine(&zero, &other.slice(20), &other, &RegressionState::brownian(&other), PolynomialBasis::default()).unwrap();
        let err = derivative_bsde_affine(&zero, &base, &[1.0; 100], &DerivCoeffs::zero(), 0.5, &ens, &state, PolynomialBasis::default());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        assert!(derivative_bsde_affine(&zero, &base, &[1.0; 100], &DerivCoeffs::zero(), 0.525, &other, &RegressionState::brownian(&other), PolynomialBasis::default()).is_err());
    }

    #[test]
    fn fd_quotient_of_linear_claim_is_horizon() {
        let ens = ensemble(3_000, 25, 13);
        let solve = |e: &PathEnsemble<f64>| {
            let xi = e.slice(25);
            solve_affine(&AffineCoeffs::constant(0.0, 0.0, 0.0), &xi, e, &RegressionState::brownian(e), PolynomialBasis::default())
        };
        let h = CameronMartinDirection::constant(1.0);
        for eps in [1e-4, 0.1, -0.5] {
            let q = fd_quotient(solve, &ens, &h, eps).unwrap();
            let worst = q.as_slice().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-8, "eps {eps}: {worst}");
        }
        assert!(fd_quotient(solve, &ens, &h, 0.0).is_err());
    }

    #[test]
    fn fd_quotient_matches_linearization() {
        let ens = ensemble(5_000, 100, 14);
        let spec = TerminalSpec::Asian {
            f: crate::terminal::SmoothFn::named("exp-neg").unwrap(),
            g: crate::terminal::SmoothFn::named("identity").unwrap(),
        };
        let grid = ens.grid().clone();
        let lambda: Vec<f64> = grid.times().iter().map(|t| 0.2 + 0.1 * t).collect();
        let mu: Vec<f64> = grid.times().iter().map(|t| -0.3 + 0.2 * t).collect();
        let coeffs = AffineCoeffs::new(Coeff::PerTime(lambda), Coeff::PerTime(mu), Coeff::Constant(0.4));
        let basis = PolynomialBasis::default();
        let solve = |e: &PathEnsemble<f64>| {
            let xi: Vec<f64> = (0..e.n_paths()).map(|p| spec.evaluate(e.grid(), e.path(p))).collect();
            solve_affine(&coeffs, &xi, e, &RegressionState::for_terminal(&spec, e), basis)
        };
        let h = CameronMartinDirection::constant(1.0);
        let q = fd_quotient(solve, &ens, &h, 1e-4).unwrap();
        let base = solve(&ens).unwrap();
        let hv = h.primitive_on(&grid);
        let dxi: Vec<f64> = (0..ens.n_paths()).map(|p| spec.directional_derivative(&grid, ens.path(p), &hv).unwrap()).collect();
        let state = RegressionState::for_terminal(&spec, &ens);
        let lin = linearized_sensitivity(&coeffs, &base, &dxi, &DerivCoeffs::zero(), &ens, &state, basis).unwrap();
        for i in [0, 30, 70, 100] {
            let (a, b) = (q.column(i), lin.column(i));
            let num = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(num / den < 1e-2, "t index {i}: relative error {}", num / den);
        }

        let minus = fd_quotient(solve, &ens, &h, -1e-4).unwrap();
        let central = {
            let up = solve(&shift_paths(&ens, &h, 1e-4)).unwrap();
            let down = solve(&shift_paths(&ens, &h, -1e-4)).unwrap();
            up.y.as_slice().iter().zip(down.y.as_slice()).map(|(a, b)| (a - b) / 2e-4).collect::<Vec<_>>()
        };
        for ((a, b), c) in q.as_slice().iter().zip(minus.as_slice()).zip(&central) {
            assert!(((a + b) / 2.0 - c).abs() < 1e-6 * (1.0 + c.abs()));
        }
    }

    proptest! {
        #[test]
        fn extremal_constants_bound_the_drift(r in 0.0..5.0f64, a in 0.1..5.0f64, rho in 0.0..1.0f64) {
            let (hi, lo) = extremal_drift_constants(r, a, rho).unwrap();
            let (ghi, glo) = grid_extrema(r, a, rho, 1e-2);
            prop_assert!(ghi <= hi + 1e-6 && glo >= lo - 1e-6);
        }

        #[test]
        fn lower_bound_never_exceeds_upper(
            c_y in 0.01..2.0f64, k_lo in 0.1..2.0f64, dk in 0.0..2.0f64,
            c_lo in -2.0..1.0f64, dc in 0.0..2.0f64, t in 0.01..1.0f64, x in -5.0..5.0f64,
        ) {
            let p = DensityBoundParams { c_y, k_lo, k_hi: k_lo + dk, c_hi: c_lo + dc, c_lo, t, horizon: 1.0, mean: 0.3 };
            let (lo, hi) = gaussian_density_bounds(&p, x);
            prop_assert!(lo <= hi * (1.0 + 1e-12));
        }
    }
}
