//! Terminal conditions ξ and their pathwise Malliavin derivatives.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::scalar::Scalar;

type RealFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// A scalar function with optionally supplied first and second derivatives.
///
/// Derivatives are never computed numerically; a missing derivative makes the
/// operations that need it fail (or report "indeterminate").
#[derive(Clone)]
pub struct SmoothFn<S> {
    name: String,
    value: RealFn<S>,
    d1: Option<RealFn<S>>,
    d2: Option<RealFn<S>>,
}

impl<S: Scalar> SmoothFn<S> {
    pub fn new(name: impl Into<String>, value: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        Self { name: name.into(), value: Arc::new(value), d1: None, d2: None }
    }

    pub fn with_first(mut self, d1: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        self.d1 = Some(Arc::new(d1));
        self
    }

    pub fn with_second(mut self, d2: impl Fn(S) -> S + Send + Sync + 'static) -> Self {
        self.d2 = Some(Arc::new(d2));
        self
    }

    /// Looks up a function from the named registry.
    ///
    /// Known names: `identity`, `neg`, `exp`, `exp-neg`, `square`, `half-square`,
    /// `put(K)` = max(K - x, 0) and `call(K)` = max(x - K, 0). Kinks get the
    /// almost-everywhere derivatives.
    pub fn named(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(k) = parse_strike(spec, "put") {
            let k = S::of(k?);
            return Ok(Self::new(spec, move |x: S| (k - x).max(S::zero()))
                .with_first(move |x: S| if x < k { -S::one() } else { S::zero() })
                .with_second(|_| S::zero()));
        }
        if let Some(k) = parse_strike(spec, "call") {
            let k = S::of(k?);
            return Ok(Self::new(spec, move |x: S| (x - k).max(S::zero()))
                .with_first(move |x: S| if x > k { S::one() } else { S::zero() })
                .with_second(|_| S::zero()));
        }
        let f = match spec {
            "identity" => Self::new(spec, |x| x).with_first(|_| S::one()).with_second(|_| S::zero()),
            "neg" => Self::new(spec, |x: S| -x).with_first(|_| -S::one()).with_second(|_| S::zero()),
            "exp" => Self::new(spec, |x: S| x.exp()).with_first(|x: S| x.exp()).with_second(|x: S| x.exp()),
            "exp-neg" => Self::new(spec, |x: S| (-x).exp())
                .with_first(|x: S| -(-x).exp())
                .with_second(|x: S| (-x).exp()),
            "square" => Self::new(spec, |x: S| x * x)
                .with_first(|x: S| x + x)
                .with_second(|_| S::of(2.0)),
            "half-square" => Self::new(spec, |x: S| x * x * S::of(0.5))
                .with_first(|x| x)
                .with_second(|_| S::one()),
            other => return invalid(format!("unknown function name '{other}'")),
        };
        Ok(f)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn value(&self, x: S) -> S {
        (self.value)(x)
    }

    pub fn first(&self) -> Option<&(dyn Fn(S) -> S + Send + Sync)> {
        self.d1.as_deref()
    }

    pub fn second(&self) -> Option<&(dyn Fn(S) -> S + Send + Sync)> {
        self.d2.as_deref()
    }

    fn require_first(&self) -> Result<&(dyn Fn(S) -> S + Send + Sync)> {
        self.first()
            .ok_or_else(|| Error::Unsupported(format!("'{}' has no first derivative", self.name)))
    }

    fn require_second(&self) -> Result<&(dyn Fn(S) -> S + Send + Sync)> {
        self.second()
            .ok_or_else(|| Error::Unsupported(format!("'{}' has no second derivative", self.name)))
    }

    /// Multiplies values and derivatives by `c`.
    pub fn scaled(&self, c: S) -> Self {
        let v = self.value.clone();
        let mut out = Self::new(format!("{c}*{}", self.name), move |x| c * v(x));
        if let Some(d1) = self.d1.clone() {
            out = out.with_first(move |x| c * d1(x));
        }
        if let Some(d2) = self.d2.clone() {
            out = out.with_second(move |x| c * d2(x));
        }
        out
    }
}

fn parse_strike(spec: &str, prefix: &str) -> Option<Result<f64>> {
    let rest = spec.strip_prefix(prefix)?.trim();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(
        inner
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidParameter(format!("bad strike in '{spec}'"))),
    )
}

impl<S> fmt::Debug for SmoothFn<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SmoothFn({})", self.name)
    }
}

/// The contingent claim ξ as a functional of the Brownian path.
#[derive(Debug, Clone)]
pub enum TerminalSpec<S> {
    /// ξ = c + σ² W_T.
    AffineGaussian { c: S, sigma2: S },
    /// ξ = α + β W_T + γ ∫_0^T W_s ds.
    PathIntegral { alpha: S, beta: S, gamma: S },
    /// ξ = f(∫_0^T g(W_s) ds).
    Asian { f: SmoothFn<S>, g: SmoothFn<S> },
    /// ξ = f(max_{s≤T} W_s).
    Lookback { f: SmoothFn<S> },
}

/// Grid index of the first maximum of a path.
pub fn argmax_index<S: Scalar>(path: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in path.iter().enumerate() {
        if v > path[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> TerminalSpec<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            TerminalSpec::AffineGaussian { .. } => "affine-gaussian",
            TerminalSpec::PathIntegral { .. } => "path-integral",
            TerminalSpec::Asian { .. } => "asian",
            TerminalSpec::Lookback { .. } => "lookback",
        }
    }

    /// ξ(ω) on one sampled path.
    pub fn evaluate(&self, grid: &TimeGrid<S>, path: &[S]) -> S {
        let w_t = path[grid.n_steps()];
        match self {
            TerminalSpec::AffineGaussian { c, sigma2 } => *c + *sigma2 * w_t,
            TerminalSpec::PathIntegral { alpha, beta, gamma } => {
                *alpha + *beta * w_t + *gamma * grid.integrate(path)
            }
            TerminalSpec::Asian { f, g } => f.value(asian_integral(g, grid, path)),
            TerminalSpec::Lookback { f } => f.value(path[argmax_index(path)]),
        }
    }

    /// D_u ξ(ω) for `u ∈ [0, T]`.
    pub fn malliavin(&self, grid: &TimeGrid<S>, path: &[S], u: S) -> Result<S> {
        if u < S::zero() || u > grid.horizon() {
            return invalid(format!("u = {u} outside [0, {}]", grid.horizon()));
        }
        match self {
            TerminalSpec::AffineGaussian { sigma2, .. } => Ok(*sigma2),
            TerminalSpec::PathIntegral { beta, gamma, .. } => Ok(*beta + *gamma * (grid.horizon() - u)),
            TerminalSpec::Asian { f, g } => {
                let df = f.require_first()?;
                let dg = g.require_first()?;
                let inner = asian_integral(g, grid, path);
                let dg_path: Vec<S> = path.iter().map(|&w| dg(w)).collect();
                Ok(df(inner) * grid.integrate_from(&dg_path, u))
            }
            TerminalSpec::Lookback { f } => {
                let df = f.require_first()?;
                let tau = argmax_index(path);
                let m = path[tau];
                Ok(if u <= grid.time(tau) { df(m) } else { S::zero() })
            }
        }
    }

    /// D_u ξ at every grid time `u = t_i`.
    pub fn malliavin_on_grid(&self, grid: &TimeGrid<S>, path: &[S]) -> Result<Vec<S>> {
        let n = grid.len();
        match self {
            TerminalSpec::AffineGaussian { sigma2, .. } => Ok(vec![*sigma2; n]),
            TerminalSpec::PathIntegral { beta, gamma, .. } => Ok(grid
                .times()
                .iter()
                .map(|&u| *beta + *gamma * (grid.horizon() - u))
                .collect()),
            TerminalSpec::Asian { f, g } => {
                let df = f.require_first()?;
                let dg = g.require_first()?;
                let scale = df(asian_integral(g, grid, path));
                let dg_path: Vec<S> = path.iter().map(|&w| dg(w)).collect();
                Ok(grid.tail_integrals(&dg_path).into_iter().map(|v| scale * v).collect())
            }
            TerminalSpec::Lookback { f } => {
                let df = f.require_first()?;
                let tau = argmax_index(path);
                let d = df(path[tau]);
                Ok((0..n).map(|i| if i <= tau { d } else { S::zero() }).collect())
            }
        }
    }

    /// Derivative of ξ along the shift `W + ε h` at ε = 0, with `h` sampled on
    /// the grid. This is the discrete counterpart of `∫_0^T D_u ξ ḣ(u) du`.
    pub fn directional_derivative(&self, grid: &TimeGrid<S>, path: &[S], h: &[S]) -> Result<S> {
        let last = grid.n_steps();
        match self {
            TerminalSpec::AffineGaussian { sigma2, .. } => Ok(*sigma2 * h[last]),
            TerminalSpec::PathIntegral { beta, gamma, .. } => Ok(*beta * h[last] + *gamma * grid.integrate(h)),
            TerminalSpec::Asian { f, g } => {
                let df = f.require_first()?;
                let dg = g.require_first()?;
                let weighted: Vec<S> = path.iter().zip(h).map(|(&w, &hv)| dg(w) * hv).collect();
                Ok(df(asian_integral(g, grid, path)) * grid.integrate(&weighted))
            }
            TerminalSpec::Lookback { f } => {
                let df = f.require_first()?;
                let tau = argmax_index(path);
                Ok(df(path[tau]) * h[tau])
            }
        }
    }

    /// D_v D_u ξ(ω); only the Asian claim is twice differentiable.
    pub fn second_malliavin(&self, grid: &TimeGrid<S>, path: &[S], u: S, v: S) -> Result<S> {
        for x in [u, v] {
            if x < S::zero() || x > grid.horizon() {
                return invalid(format!("time {x} outside [0, {}]", grid.horizon()));
            }
        }
        match self {
            TerminalSpec::Asian { f, g } => {
                let df = f.require_first()?;
                let d2f = f.require_second()?;
                let dg = g.require_first()?;
                let d2g = g.require_second()?;
                let inner = asian_integral(g, grid, path);
                let dg_path: Vec<S> = path.iter().map(|&w| dg(w)).collect();
                let d2g_path: Vec<S> = path.iter().map(|&w| d2g(w)).collect();
                let first = d2f(inner) * grid.integrate_from(&dg_path, u) * grid.integrate_from(&dg_path, v);
                let second = df(inner) * grid.integrate_from(&d2g_path, u.min(v));
                Ok(first + second)
            }
            TerminalSpec::Lookback { .. } => Err(Error::Unsupported(
                "the running maximum is not twice Malliavin differentiable".into(),
            )),
            other => Err(Error::Unsupported(format!(
                "second Malliavin derivative is only provided for Asian claims, not '{}'",
                other.kind()
            ))),
        }
    }

    /// Path statistics (besides `W_t`) that make the claim Markovian:
    /// the running integral for path-integral and Asian claims, the running
    /// maximum for lookbacks.
    pub fn running_statistic(&self, grid: &TimeGrid<S>, path: &[S]) -> Option<Vec<S>> {
        match self {
            TerminalSpec::AffineGaussian { .. } => None,
            TerminalSpec::PathIntegral { .. } => Some(grid.cumulative_integral(path)),
            TerminalSpec::Asian { g, .. } => {
                let gv: Vec<S> = path.iter().map(|&w| g.value(w)).collect();
                Some(grid.cumulative_integral(&gv))
            }
            TerminalSpec::Lookback { .. } => {
                let mut m = S::neg_infinity();
                Some(path.iter().map(|&w| {
                    m = m.max(w);
                    m
                }).collect())
            }
        }
    }
}

fn asian_integral<S: Scalar>(g: &SmoothFn<S>, grid: &TimeGrid<S>, path: &[S]) -> S {
    let gv: Vec<S> = path.iter().map(|&w| g.value(w)).collect();
    grid.integrate(&gv)
}
