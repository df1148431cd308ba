//! Gene expression model: a BSDE with Hill-type synthesis and linear
//! degradation, its density bounds, and a Gillespie benchmark.

use rayon::prelude::*;

use crate::bsde::{solve_lsmc, AffineCoeffs, BsdeSolution, Coeff, Generator, PathPoint, SolverSettings};
use crate::error::{invalid, Result};
use crate::grid::{Matrix, PathEnsemble};
use crate::malliavin::{
    derivative_bsde_affine, extremal_drift_constants, gaussian_density_bounds, half_mean_abs_dev, DensityBoundParams,
    DerivCoeffs, MalliavinSlice,
};
use crate::regression::RegressionState;
use crate::scalar::Scalar;
use crate::sde::{substream, StreamTag};
use crate::stats::{histogram_density, sample_moments, Histogram};
use crate::terminal::TerminalSpec;

/// Parameters of `Y_t = ξ + ∫_t^T (R a Y²/(1 + a Y²) - ρ Y) ds - ∫_t^T Z dW`.
#[derive(Debug, Clone)]
pub struct GeneParams<S> {
    /// Maximal activation rate `R`.
    pub activation: S,
    /// Hill scale `a`.
    pub a: S,
    /// Degradation rate `ρ`.
    pub rho: S,
    pub terminal: TerminalSpec<S>,
}

impl<S: Scalar> GeneParams<S> {
    pub fn new(activation: S, a: S, rho: S, terminal: TerminalSpec<S>) -> Result<Self> {
        let p = Self { activation, a, rho, terminal };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > S::zero()) || !self.a.is_finite() {
            return invalid(format!("Hill scale a must be positive, got {}", self.a));
        }
        if !(self.activation >= S::zero()) || !self.activation.is_finite() {
            return invalid(format!("activation rate R must be nonnegative, got {}", self.activation));
        }
        if !(self.rho >= S::zero()) || !self.rho.is_finite() {
            return invalid(format!("degradation rate must be nonnegative, got {}", self.rho));
        }
        Ok(())
    }

    fn generator(&self) -> HillGenerator<S> {
        HillGenerator { activation: self.activation, a: self.a, rho: self.rho }
    }
}

/// `R a y²/(1 + a y²) - ρ y`.
pub fn hill_generator<S: Scalar>(y: S, p: &GeneParams<S>) -> S {
    p.generator().at(y)
}

/// `d/dy` of [`hill_generator`]: `2 R a y/(1 + a y²)² - ρ`.
pub fn hill_derivative<S: Scalar>(y: S, p: &GeneParams<S>) -> S {
    p.generator().slope(y)
}

/// The Hill generator as a [`Generator`]; it does not depend on `z`.
#[derive(Debug, Clone, Copy)]
pub struct HillGenerator<S> {
    pub activation: S,
    pub a: S,
    pub rho: S,
}

impl<S: Scalar> HillGenerator<S> {
    fn at(&self, y: S) -> S {
        let ay2 = self.a * y * y;
        self.activation * ay2 / (S::one() + ay2) - self.rho * y
    }

    fn slope(&self, y: S) -> S {
        let d = S::one() + self.a * y * y;
        S::of(2.0) * self.activation * self.a * y / (d * d) - self.rho
    }
}

impl<S: Scalar> Generator<S> for HillGenerator<S> {
    fn value(&self, _at: PathPoint<S>, y: S, _z: S) -> S {
        self.at(y)
    }

    fn dy(&self, _at: PathPoint<S>, y: S, _z: S) -> S {
        self.slope(y)
    }

    fn dz(&self, _at: PathPoint<S>, _y: S, _z: S) -> S {
        S::zero()
    }
}

fn terminal_values<S: Scalar>(spec: &TerminalSpec<S>, ens: &PathEnsemble<S>) -> Vec<S> {
    (0..ens.n_paths()).into_par_iter().map(|p| spec.evaluate(ens.grid(), ens.path(p))).collect()
}

/// Solves the gene BSDE for the Gaussian-type terminal conditions of the
/// model (`AffineGaussian` or `PathIntegral`).
pub fn solve_gene_bsde<S: Scalar>(p: &GeneParams<S>, ens: &PathEnsemble<S>, settings: SolverSettings) -> Result<BsdeSolution<S>> {
    match p.terminal {
        TerminalSpec::AffineGaussian { .. } | TerminalSpec::PathIntegral { .. } => solve_gene_bsde_any(p, ens, settings),
        ref other => invalid(format!(
            "the gene model takes an affine-gaussian or path-integral terminal, not '{}'",
            other.kind()
        )),
    }
}

/// Solves the gene BSDE for any terminal condition, regressing on the
/// claim's sufficient statistics.
pub fn solve_gene_bsde_any<S: Scalar>(p: &GeneParams<S>, ens: &PathEnsemble<S>, settings: SolverSettings) -> Result<BsdeSolution<S>> {
    p.validate()?;
    let xi = terminal_values(&p.terminal, ens);
    let state = RegressionState::for_terminal(&p.terminal, ens);
    solve_lsmc(&p.generator(), &xi, ens, &state, settings)
}

/// `(E Y_t, Var Y_t)` at the requested grid times.
pub fn slice_moments<S: Scalar>(sol: &BsdeSolution<S>, times: &[S]) -> Result<Vec<(S, S, S)>> {
    times
        .iter()
        .map(|&t| {
            let (m, v) = sample_moments(&sol.y_at(sol.grid.index_of(t)?))?;
            Ok((t, m, v))
        })
        .collect()
}

/// `D_u Y` for the gene model: the linear BSDE with `μ_s = f'(Y_s)`.
pub fn gene_derivative_slice<S: Scalar>(
    p: &GeneParams<S>,
    base: &BsdeSolution<S>,
    ens: &PathEnsemble<S>,
    settings: SolverSettings,
    u: S,
) -> Result<MalliavinSlice<S>> {
    let gen = p.generator();
    let slope = Matrix::from_fn(base.y.rows(), base.y.cols(), |r, c| gen.slope(base.y.get(r, c)));
    let coeffs = AffineCoeffs::new(Coeff::zero(), Coeff::PerPath(slope), Coeff::zero());
    let dxi = (0..ens.n_paths())
        .into_par_iter()
        .map(|q| p.terminal.malliavin(ens.grid(), ens.path(q), u))
        .collect::<Result<Vec<S>>>()?;
    let state = RegressionState::for_terminal(&p.terminal, ens);
    derivative_bsde_affine(&coeffs, base, &dxi, &DerivCoeffs::zero(), u, ens, &state, settings.basis)
}

/// Bounds `0 < k_lo ≤ D_u ξ ≤ k_hi` for the terminal conditions of the model.
pub fn terminal_derivative_bounds<S: Scalar>(terminal: &TerminalSpec<S>, horizon: S) -> Result<(S, S)> {
    let (lo, hi) = match terminal {
        TerminalSpec::AffineGaussian { sigma2, .. } => (*sigma2, *sigma2),
        TerminalSpec::PathIntegral { beta, gamma, .. } => {
            let end = *beta + *gamma * horizon;
            (beta.min(end), beta.max(end))
        }
        other => {
            return invalid(format!("no deterministic derivative bounds for '{}' claims", other.kind()));
        }
    };
    if !(lo > S::zero()) {
        return invalid(format!("D_u ξ must be bounded below by a positive constant, got {lo}"));
    }
    Ok((lo, hi))
}

/// Histogram of `Y_t` with the Gaussian bound curves at the bin centers.
#[derive(Debug, Clone)]
pub struct DensitySlice<S> {
    pub t: S,
    pub mean: S,
    pub var: S,
    pub c_y: S,
    pub bounds: DensityBoundParams<S>,
    pub histogram: Histogram<S>,
    pub f_i: Vec<S>,
    pub f_s: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct GeneDensityRun<S> {
    pub solution: BsdeSolution<S>,
    pub slices: Vec<DensitySlice<S>>,
}

/// Solves the gene BSDE and compares the law of `Y_t` with its Gaussian
/// bounds at each requested time.
pub fn gene_density_experiment<S: Scalar>(
    p: &GeneParams<S>,
    times: &[S],
    ens: &PathEnsemble<S>,
    bins: usize,
    settings: SolverSettings,
) -> Result<GeneDensityRun<S>> {
    let grid = ens.grid();
    let mut indices = Vec::with_capacity(times.len());
    for &t in times {
        if t <= S::zero() {
            return invalid("no density at t=0: Y_0 is deterministic");
        }
        indices.push(grid.index_of(t)?);
    }
    let (k_lo, k_hi) = terminal_derivative_bounds(&p.terminal, grid.horizon())?;
    let (c_hi, c_lo) = extremal_drift_constants(p.activation, p.a, p.rho)?;
    let solution = solve_gene_bsde(p, ens, settings)?;

    let slices = times
        .iter()
        .zip(indices)
        .map(|(&t, i)| {
            let y = solution.y_at(i);
            let (mean, var) = sample_moments(&y)?;
            let c_y = half_mean_abs_dev(&y);
            let bounds = DensityBoundParams { c_y, k_lo, k_hi, c_hi, c_lo, t, horizon: grid.horizon(), mean };
            bounds.validate()?;
            let histogram = histogram_density(&y, bins, None)?;
            let (f_i, f_s) = (0..bins).map(|k| gaussian_density_bounds(&bounds, histogram.center(k))).unzip();
            Ok(DensitySlice { t, mean, var, c_y, bounds, histogram, f_i, f_s })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneDensityRun { solution, slices })
}

/// Settings of the stochastic simulation benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaParams<S> {
    /// System size Ω: copy number per unit concentration.
    pub omega: S,
    pub n0: u64,
    pub t_max: S,
    pub n_runs: usize,
    /// Number of recording intervals on `[0, t_max]`.
    pub n_record: usize,
}

impl<S: Scalar> SsaParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > S::zero()) || !self.omega.is_finite() {
            return invalid(format!("omega must be positive, got {}", self.omega));
        }
        if !(self.t_max > S::zero()) || !self.t_max.is_finite() {
            return invalid(format!("t_max must be positive, got {}", self.t_max));
        }
        if self.n_record == 0 {
            return invalid("n_record must be at least 1");
        }
        Ok(())
    }
}

/// Copy-number trajectories on a uniform recording grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaResult<S> {
    pub times: Vec<S>,
    /// One row per run, one column per recording time.
    pub counts: Vec<Vec<u64>>,
}

impl<S: Scalar> SsaResult<S> {
    pub fn terminal(&self) -> Vec<u64> {
        self.counts.iter().map(|r| *r.last().unwrap()).collect()
    }

    /// Copy numbers at recording index `k`, as concentrations `n / Ω`.
    pub fn concentrations(&self, k: usize, omega: S) -> Vec<S> {
        self.counts.iter().map(|r| S::of(r[k] as f64) / omega).collect()
    }
}

/// Exact stochastic simulation of the birth–death chain with birth
/// propensity `Ω R a x²/(1 + a x²)` and death propensity `ρ n`, `x = n/Ω`.
pub fn gillespie_ssa<S: Scalar>(p: &GeneParams<S>, s: &SsaParams<S>, seed: u64) -> Result<SsaResult<S>> {
    p.validate()?;
    s.validate()?;
    let times: Vec<S> = (0..=s.n_record).map(|k| s.t_max * S::of_usize(k) / S::of_usize(s.n_record)).collect();
    let counts = (0..s.n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = substream(seed, StreamTag::Gillespie, run as u64);
            let mut out = Vec::with_capacity(times.len());
            let (mut t, mut n) = (S::zero(), s.n0);
            while out.len() < times.len() {
                let x = S::of(n as f64) / s.omega;
                let ax2 = p.a * x * x;
                let birth = s.omega * p.activation * ax2 / (S::one() + ax2);
                let death = p.rho * S::of(n as f64);
                let total = birth + death;
                if !(total > S::zero()) {
                    out.resize(times.len(), n);
                    break;
                }
                let next = t - S::uniform_open0(&mut rng).ln() / total;
                while out.len() < times.len() && times[out.len()] < next {
                    out.push(n);
                }
                if S::uniform_open0(&mut rng) * total <= birth {
                    n += 1;
                } else {
                    n -= 1;
                }
                t = next;
            }
            out
        })
        .collect();
    Ok(SsaResult { times, counts })
}

/// Sign check at Monte Carlo tolerance: the smallest `Y` and the tolerance
/// (three regression standard errors of its time slice).
pub fn min_with_tolerance<S: Scalar>(sol: &BsdeSolution<S>) -> (S, S) {
    let (min, i) = sol.min_y();
    (min, S::of(3.0) * sol.y_slice_se[i])
}
