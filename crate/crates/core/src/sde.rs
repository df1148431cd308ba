//! Forward simulation: Brownian ensembles, Vasicek short rates and
//! Cameron–Martin shifts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{CameronMartinDirection, Matrix, PathEnsemble, TimeGrid};
use crate::scalar::Scalar;

/// Independent random streams. Each consumer of randomness uses its own tag so
/// that the streams of different consumers never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Brownian = 0,
    BridgeMaximum = 1,
    Gillespie = 2,
    Replication = 3,
}

/// Deterministic generator for item `index` of a stream, independent of any
/// scheduling.
pub fn substream(master_seed: u64, tag: StreamTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((tag as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

/// Samples `n_paths` Brownian paths; path `p` draws from its own substream.
pub fn simulate_brownian<S: Scalar>(grid: &TimeGrid<S>, n_paths: usize, master_seed: u64) -> Result<PathEnsemble<S>> {
    if n_paths == 0 {
        return invalid("n_paths must be at least 1");
    }
    let cols = grid.len();
    let sd = grid.dt().sqrt();
    let mut data = vec![S::zero(); n_paths * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        let mut rng = substream(master_seed, StreamTag::Brownian, p as u64);
        let mut w = S::zero();
        for cell in row.iter_mut().skip(1) {
            w = w + sd * S::standard_normal(&mut rng);
            *cell = w;
        }
    });
    PathEnsemble::from_paths(grid.clone(), Matrix::from_vec(n_paths, cols, data)?, master_seed)
}

/// Parameters of `dr = a(b - r)dt + ϖ dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VasicekParams<S> {
    pub a: S,
    pub b: S,
    pub varpi: S,
    pub r0: S,
}

impl<S: Scalar> VasicekParams<S> {
    pub fn new(a: S, b: S, varpi: S, r0: S) -> Result<Self> {
        let p = Self { a, b, varpi, r0 };
        p.validate()?;
        Ok(p)
    }

    /// A deterministic constant rate `r0` (ϖ = 0 and a = 0).
    pub fn constant(r0: S) -> Self {
        Self { a: S::zero(), b: S::zero(), varpi: S::zero(), r0 }
    }

    /// Requires `a ≥ 0` and `ϖ ≥ 0`; ϖ = 0 is allowed as the deterministic limit.
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= S::zero()) {
            return invalid(format!("mean reversion a must be non-negative, got {}", self.a));
        }
        if !(self.varpi >= S::zero()) {
            return invalid(format!("volatility must be non-negative, got {}", self.varpi));
        }
        Ok(())
    }

    /// E[r_t] = r0 e^{-at} + b(1 - e^{-at}).
    pub fn mean(&self, t: S) -> S {
        let e = (-self.a * t).exp();
        self.r0 * e + self.b * (S::one() - e)
    }

    /// Var[r_t] = ϖ²(1 - e^{-2at}) / (2a), or ϖ² t when a = 0.
    pub fn variance(&self, t: S) -> S {
        let v2 = self.varpi * self.varpi;
        if self.a == S::zero() {
            v2 * t
        } else {
            v2 * (S::one() - (-S::of(2.0) * self.a * t).exp()) / (S::of(2.0) * self.a)
        }
    }

    /// D_u r_t = ϖ e^{-a(t-u)} for u ≤ t, zero otherwise.
    pub fn malliavin(&self, u: S, t: S) -> S {
        if u > t {
            S::zero()
        } else {
            self.varpi * (-self.a * (t - u)).exp()
        }
    }

    /// Multiplier of ΔW in one step, chosen so the one-step variance is exact:
    /// √((1 - e^{-2a dt}) / (2a)) / √dt, which tends to 1 as a → 0.
    fn noise_scale(&self, dt: S) -> S {
        let x = self.a * dt;
        if x < S::of(1e-8) {
            S::one() - x * S::of(0.5)
        } else {
            ((S::one() - (-S::of(2.0) * x).exp()) / (S::of(2.0) * x)).sqrt()
        }
    }
}

/// Simulated short-rate paths sharing the grid of their driving ensemble.
#[derive(Debug, Clone)]
pub struct RatePaths<S> {
    grid: TimeGrid<S>,
    r: Matrix<S>,
}

impl<S: Scalar> RatePaths<S> {
    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn rates(&self) -> &Matrix<S> {
        &self.r
    }

    pub fn path(&self, p: usize) -> &[S] {
        self.r.row(p)
    }
}

/// Vasicek rates driven by the Brownian increments of `driving`.
///
/// One step is `r_{i+1} = r_i e^{-a dt} + b(1 - e^{-a dt}) + ϖ κ ΔW_i`, where κ
/// makes the conditional variance of the step match the exact
/// Ornstein–Uhlenbeck transition. The same ΔW therefore drives both the rate
/// and any BSDE solved on the ensemble; for a = 0 the step is `r_i + ϖ ΔW_i`.
pub fn simulate_vasicek<S: Scalar>(params: &VasicekParams<S>, driving: &PathEnsemble<S>) -> Result<RatePaths<S>> {
    params.validate()?;
    let grid = driving.grid().clone();
    let dt = grid.dt();
    let decay = (-params.a * dt).exp();
    let drift = params.b * (S::one() - decay);
    let scale = params.varpi * params.noise_scale(dt);
    let cols = grid.len();
    let mut data = vec![S::zero(); driving.n_paths() * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        let w = driving.path(p);
        row[0] = params.r0;
        for i in 0..grid.n_steps() {
            row[i + 1] = row[i] * decay + drift + scale * (w[i + 1] - w[i]);
        }
    });
    Ok(RatePaths { r: Matrix::from_vec(driving.n_paths(), cols, data)?, grid })
}

/// Shifts every path by `eps · h(t_i)`.
pub fn shift_paths<S: Scalar>(ens: &PathEnsemble<S>, h: &CameronMartinDirection<S>, eps: S) -> PathEnsemble<S> {
    let shift: Vec<S> = h.primitive_on(ens.grid()).into_iter().map(|v| eps * v).collect();
    ens.map_paths(|_, row| {
        for (w, s) in row.iter_mut().zip(&shift) {
            *w = *w + *s;
        }
    })
}
