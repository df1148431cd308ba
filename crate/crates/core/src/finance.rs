//! Short-rate pricing: `dY = (r Y + θ Z) dt + Z dW` with Vasicek rates, plus
//! density-existence checks for Asian and lookback claims.

use rand::Rng;
use rayon::prelude::*;

use crate::bsde::{
    mean_and_se, solve_affine, weighted_regress, AffineCoeffs, BsdeSolution, Coeff, GirsanovWeights, SolverSettings,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{Matrix, PathEnsemble};
use crate::regression::{PolynomialBasis, RegressionState};
use crate::scalar::Scalar;
use crate::sde::{simulate_vasicek, substream, RatePaths, StreamTag, VasicekParams};
use crate::terminal::{argmax_index, TerminalSpec};

/// A pricing problem under Vasicek rates with market price of risk θ.
#[derive(Debug, Clone)]
pub struct PricingSpec<S> {
    pub vasicek: VasicekParams<S>,
    pub theta: Coeff<S>,
    pub claim: TerminalSpec<S>,
}

impl<S: Scalar> PricingSpec<S> {
    pub fn new(vasicek: VasicekParams<S>, theta: Coeff<S>, claim: TerminalSpec<S>) -> Result<Self> {
        vasicek.validate()?;
        Ok(Self { vasicek, theta, claim })
    }

    /// θ sampled from a function of time.
    pub fn with_theta_fn(
        vasicek: VasicekParams<S>,
        theta: impl Fn(S) -> S,
        times: &[S],
        claim: TerminalSpec<S>,
    ) -> Result<Self> {
        let values: Vec<S> = times.iter().map(|&t| theta(t)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("theta is not finite on the grid");
        }
        Self::new(vasicek, Coeff::PerTime(values), claim)
    }

    fn negated_theta(&self) -> Coeff<S> {
        match &self.theta {
            Coeff::Constant(c) => Coeff::Constant(-*c),
            Coeff::PerTime(v) => Coeff::PerTime(v.iter().map(|x| -*x).collect()),
            Coeff::PerPath(m) => Coeff::PerPath(Matrix::from_fn(m.rows(), m.cols(), |r, c| -m.get(r, c))),
        }
    }
}

/// Regressors for pricing: the claim's own state plus the short rate when it
/// is random.
///
/// The rate enters only after `degree` steps. Before that it is a linear
/// function of the first few `W_{t_j}`, and next to a running maximum that
/// takes one of those values a polynomial of the basis degree can vanish on
/// every path.
fn pricing_state<S: Scalar>(
    spec: &PricingSpec<S>,
    ens: &PathEnsemble<S>,
    rates: &RatePaths<S>,
    basis: PolynomialBasis,
) -> Result<RegressionState<S>> {
    let state = RegressionState::for_terminal(&spec.claim, ens);
    if spec.vasicek.varpi > S::zero() {
        state.with_feature_from(rates.rates().clone(), basis.degree.max(1) + 1)
    } else {
        Ok(state)
    }
}

fn rate_coeff<S: Scalar>(spec: &PricingSpec<S>, rates: &RatePaths<S>) -> Coeff<S> {
    if spec.vasicek.varpi == S::zero() {
        Coeff::PerTime(rates.path(0).iter().map(|r| -*r).collect())
    } else {
        let m = rates.rates();
        Coeff::PerPath(Matrix::from_fn(m.rows(), m.cols(), |r, c| -m.get(r, c)))
    }
}

/// `Y_t = E^Q_t[ξ e^{-∫_t^T r ds}]` with `dQ/dP = E(-∫θ dW)`.
///
/// In the `Y_t = ξ + ∫_t^T f ds - ∫_t^T Z dW` form the generator is
/// `f = -r y - θ z`, so this is the affine solver with λ = 0, μ = -r, ν = -θ.
pub fn price_claim<S: Scalar>(spec: &PricingSpec<S>, ens: &PathEnsemble<S>, settings: SolverSettings) -> Result<BsdeSolution<S>> {
    let rates = simulate_vasicek(&spec.vasicek, ens)?;
    let grid = ens.grid();
    let xi: Vec<S> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| spec.claim.evaluate(grid, ens.path(p)))
        .collect();
    let coeffs = AffineCoeffs::new(Coeff::zero(), rate_coeff(spec, &rates), spec.negated_theta());
    let state = pricing_state(spec, ens, &rates, settings.basis)?;
    solve_affine(&coeffs, &xi, ens, &state, settings.basis)
}

/// Per-path Z from the Clark–Ocone representation, with the regression
/// standard error of each time slice.
#[derive(Debug, Clone)]
pub struct ClarkOconeZ<S> {
    /// `n_paths × n_steps`, column `i` at `t_i`.
    pub z: Matrix<S>,
    pub slice_se: Vec<S>,
}

/// `Z_t = E^Q_t[D_t ξ e^{-∫_t^T r} - ∫_t^T ϖ e^{-a(s-t)} Y_s e^{-∫_t^s r} ds]`.
///
/// The second term is the response of the discount factor to the noise,
/// through `D_t r_s = ϖ e^{-a(s-t)}`; `Y` is taken from `base`. Requires a
/// deterministic θ.
pub fn clark_ocone_z<S: Scalar>(
    spec: &PricingSpec<S>,
    base: &BsdeSolution<S>,
    ens: &PathEnsemble<S>,
    settings: SolverSettings,
) -> Result<ClarkOconeZ<S>> {
    if !spec.theta.is_deterministic() {
        return Err(Error::Unsupported(
            "the Clark-Ocone representation here needs a deterministic theta".into(),
        ));
    }
    base.grid.check_same(ens.grid())?;
    if base.n_paths() != ens.n_paths() {
        return Err(Error::ShapeMismatch("base solution does not match the ensemble".into()));
    }
    let grid = ens.grid();
    let n = ens.n_paths();
    let n_steps = grid.n_steps();
    let cols = grid.len();
    let half_dt = grid.dt() * S::of(0.5);
    let rates = simulate_vasicek(&spec.vasicek, ens)?;
    let varpi = spec.vasicek.varpi;
    let a = spec.vasicek.a;

    let mut targets = vec![S::zero(); n * cols];
    targets
        .par_chunks_mut(cols)
        .enumerate()
        .try_for_each(|(p, row)| -> Result<()> {
            let w = ens.path(p);
            let r = rates.path(p);
            let d = spec.claim.malliavin_on_grid(grid, w)?;
            let mut disc = S::one();
            let mut feedback = S::zero();
            row[n_steps] = d[n_steps];
            for i in (0..n_steps).rev() {
                let step = (-(r[i] + r[i + 1]) * half_dt).exp();
                disc = disc * step;
                if varpi > S::zero() {
                    let decay = step * (-a * grid.dt()).exp();
                    let y_now = base.y.get(p, i);
                    let y_next = base.y.get(p, i + 1);
                    feedback = decay * feedback + varpi * (y_now + decay * y_next) * half_dt;
                }
                row[i] = d[i] * disc - feedback;
            }
            Ok(())
        })?;

    let weights = GirsanovWeights::new(ens, &spec.negated_theta());
    let state = pricing_state(spec, ens, &rates, settings.basis)?;
    let mut z = Matrix::zeros(n, n_steps);
    let mut slice_se = vec![S::zero(); n_steps];
    for i in 0..n_steps {
        let ratio = weights.ratios(n, i)?;
        let t: Vec<S> = (0..n).map(|p| ratio[p] * targets[p * cols + i]).collect();
        let fit = weighted_regress(&weights, &ratio, &t, &state.at(i), settings.basis, i)?;
        z.set_column(i, &fit.fitted);
        slice_se[i] = if i == 0 { mean_and_se(&t).1 } else { fit.fitted_se };
    }
    Ok(ClarkOconeZ { z, slice_se })
}

/// ξ per path for an Asian claim.
pub fn asian_payoff<S: Scalar>(claim: &TerminalSpec<S>, ens: &PathEnsemble<S>) -> Result<Vec<S>> {
    if !matches!(claim, TerminalSpec::Asian { .. }) {
        return invalid(format!("expected an asian claim, got '{}'", claim.kind()));
    }
    Ok(payoffs(claim, ens))
}

/// ξ per path for a lookback claim.
pub fn lookback_payoff<S: Scalar>(claim: &TerminalSpec<S>, ens: &PathEnsemble<S>) -> Result<Vec<S>> {
    if !matches!(claim, TerminalSpec::Lookback { .. }) {
        return invalid(format!("expected a lookback claim, got '{}'", claim.kind()));
    }
    Ok(payoffs(claim, ens))
}

fn payoffs<S: Scalar>(claim: &TerminalSpec<S>, ens: &PathEnsemble<S>) -> Vec<S> {
    (0..ens.n_paths())
        .into_par_iter()
        .map(|p| claim.evaluate(ens.grid(), ens.path(p)))
        .collect()
}

/// Yes / no / cannot tell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriState {
    Yes,
    No,
    Indeterminate,
}

impl TriState {
    pub fn as_str(self) -> &'static str {
        match self {
            TriState::Yes => "yes",
            TriState::No => "no",
            TriState::Indeterminate => "indeterminate",
        }
    }

    fn and(self, other: TriState) -> TriState {
        match (self, other) {
            (TriState::No, _) | (_, TriState::No) => TriState::No,
            (TriState::Yes, TriState::Yes) => TriState::Yes,
            _ => TriState::Indeterminate,
        }
    }

    fn or(self, other: TriState) -> TriState {
        match (self, other) {
            (TriState::Yes, _) | (_, TriState::Yes) => TriState::Yes,
            (TriState::No, TriState::No) => TriState::No,
            _ => TriState::Indeterminate,
        }
    }
}

/// The sufficient conditions for densities of `Y_t` and `Z_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionId {
    XiPlus,
    XiMinus,
    A1Plus,
    A2Plus,
    A1Minus,
    A2Minus,
    LbPlus,
    LbMinus,
    DzSecondOrder,
}

impl ConditionId {
    pub const ALL: [ConditionId; 9] = [
        ConditionId::XiPlus,
        ConditionId::XiMinus,
        ConditionId::A1Plus,
        ConditionId::A2Plus,
        ConditionId::A1Minus,
        ConditionId::A2Minus,
        ConditionId::LbPlus,
        ConditionId::LbMinus,
        ConditionId::DzSecondOrder,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConditionId::XiPlus => "xi_plus",
            ConditionId::XiMinus => "xi_minus",
            ConditionId::A1Plus => "A1+",
            ConditionId::A2Plus => "A2+",
            ConditionId::A1Minus => "A1-",
            ConditionId::A2Minus => "A2-",
            ConditionId::LbPlus => "lb+",
            ConditionId::LbMinus => "lb-",
            ConditionId::DzSecondOrder => "DZ-second-order",
        }
    }
}

/// Outcome of one condition, with what it implies for the densities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: ConditionId,
    pub holds: TriState,
    /// Where strictness was observed, or why the condition fails.
    pub witness: String,
    pub y_density: TriState,
    pub z_density: TriState,
}

/// Fraction of sampled points with a strict inequality required for "yes".
pub const STRICT_FRACTION: f64 = 0.01;

#[derive(Clone, Copy)]
enum Sign {
    Pos,
    Neg,
}

impl Sign {
    fn sym(self, strict: bool) -> &'static str {
        match (self, strict) {
            (Sign::Pos, false) => ">= 0",
            (Sign::Neg, false) => "<= 0",
            (Sign::Pos, true) => "> 0",
            (Sign::Neg, true) => "< 0",
        }
    }

    fn oriented<S: Scalar>(self, v: S) -> S {
        match self {
            Sign::Pos => v,
            Sign::Neg => -v,
        }
    }
}

struct Sampled<'a, S> {
    name: &'static str,
    xs: &'a [S],
    values: Option<Vec<S>>,
}

impl<S: Scalar> Sampled<'_, S> {
    fn weak(&self, sign: Sign) -> std::result::Result<(), String> {
        let values = self.values.as_ref().ok_or_else(|| format!("{} is not available", self.name))?;
        match values.iter().position(|&v| !(sign.oriented(v) >= S::zero())) {
            None => Ok(()),
            Some(k) => Err(format!("{} {} fails at x = {}", self.name, sign.sym(false), self.xs[k])),
        }
    }

    /// Number of sample points with a strict inequality.
    fn strict_count(&self, sign: Sign) -> usize {
        self.values
            .as_ref()
            .map_or(0, |v| v.iter().filter(|&&x| sign.oriented(x) > S::zero()).count())
    }

    fn is_strict(&self, sign: Sign) -> bool {
        let need = ((self.xs.len() as f64) * STRICT_FRACTION).ceil().max(1.0) as usize;
        self.strict_count(sign) >= need
    }
}

struct SignOutcome {
    holds: TriState,
    witness: String,
}

/// Weak inequalities everywhere, then `strict` (all of them, or any of them).
fn sign_pattern<S: Scalar>(
    weak: &[(&Sampled<'_, S>, Sign)],
    strict: &[(&Sampled<'_, S>, Sign)],
    any_strict: bool,
) -> SignOutcome {
    for (s, sign) in weak {
        if s.values.is_none() {
            return SignOutcome { holds: TriState::Indeterminate, witness: format!("{} is not available", s.name) };
        }
        if let Err(w) = s.weak(*sign) {
            return SignOutcome { holds: TriState::No, witness: w };
        }
    }
    let total = weak.first().map_or(0, |(s, _)| s.xs.len());
    let describe = |(s, sign): &(&Sampled<'_, S>, Sign)| {
        format!("{} {} at {} of {} points", s.name, sign.sym(true), s.strict_count(*sign), total)
    };
    let ok: Vec<bool> = strict.iter().map(|(s, sign)| s.is_strict(*sign)).collect();
    let holds = if any_strict { ok.iter().any(|&b| b) } else { ok.iter().all(|&b| b) };
    let witness = strict.iter().map(describe).collect::<Vec<_>>().join(", ");
    if holds {
        SignOutcome { holds: TriState::Yes, witness }
    } else {
        SignOutcome { holds: TriState::No, witness: format!("not strict enough: {witness}") }
    }
}

/// Sign of (f, f', g', f'', g'') in the four Asian patterns.
const ASIAN_TABLE: [(ConditionId, [Sign; 5]); 4] = [
    (ConditionId::A1Plus, [Sign::Pos, Sign::Pos, Sign::Neg, Sign::Pos, Sign::Pos]),
    (ConditionId::A2Plus, [Sign::Pos, Sign::Neg, Sign::Pos, Sign::Pos, Sign::Neg]),
    (ConditionId::A1Minus, [Sign::Neg, Sign::Pos, Sign::Pos, Sign::Neg, Sign::Neg]),
    (ConditionId::A2Minus, [Sign::Neg, Sign::Neg, Sign::Neg, Sign::Neg, Sign::Pos]),
];

fn report(condition: ConditionId, holds: TriState, witness: impl Into<String>, y: TriState, z: TriState) -> ConditionReport {
    ConditionReport { condition, holds, witness: witness.into(), y_density: y, z_density: z }
}

/// Evaluates every density condition on `sample_grid`.
///
/// Weak inequalities must hold at every sampled point; strict ones at no
/// fewer than 1% of the points (and at least one) before a condition is
/// reported as holding. For Asian claims `f` and its derivatives are sampled
/// on `sample_grid` as values of `∫g(W)`, `g` as values of `W`; for lookbacks
/// `f` is sampled as values of the running maximum.
pub fn check_density_conditions<S: Scalar>(claim: &TerminalSpec<S>, sample_grid: &[S]) -> Result<Vec<ConditionReport>> {
    if sample_grid.is_empty() {
        return invalid("sample grid is empty");
    }
    if sample_grid.iter().any(|x| !x.is_finite()) {
        return invalid("sample grid contains non-finite points");
    }
    let xs = sample_grid;
    let sample = |name: &'static str, f: Option<&(dyn Fn(S) -> S + Send + Sync)>| Sampled {
        name,
        xs,
        values: f.map(|f| xs.iter().map(|&x| f(x)).collect()),
    };
    let no = TriState::No;
    match claim {
        TerminalSpec::Asian { f, g } => {
            let fv = Sampled { name: "f", xs, values: Some(xs.iter().map(|&x| f.value(x)).collect()) };
            let f1 = sample("f'", f.first());
            let g1 = sample("g'", g.first());
            let f2 = sample("f''", f.second());
            let g2 = sample("g''", g.second());
            let mut out = Vec::with_capacity(9);
            let mut first_order = Vec::new();
            let mut combined = TriState::No;
            for (id, s) in ASIAN_TABLE {
                let first = sign_pattern(&[(&fv, s[0]), (&f1, s[1]), (&g1, s[2])], &[(&f1, s[1]), (&g1, s[2])], false);
                let second = sign_pattern(&[(&f2, s[3]), (&g2, s[4])], &[(&f2, s[3]), (&g2, s[4])], true);
                let both = first.holds.and(second.holds);
                combined = combined.or(both);
                let witness = match first.holds {
                    TriState::Yes => format!("(i) {}; (ii) {}: {}", first.witness, second.holds.as_str(), second.witness),
                    _ => format!("(i) {}", first.witness),
                };
                first_order.push((id, first.holds, first.witness.clone()));
                out.push(report(id, first.holds, witness, first.holds, both));
            }
            let xi = |ids: [ConditionId; 2], cond: ConditionId| {
                let hits: Vec<&(ConditionId, TriState, String)> =
                    first_order.iter().filter(|(id, _, _)| ids.contains(id)).collect();
                let holds = hits.iter().fold(TriState::No, |acc, h| acc.or(h.1));
                let witness = match hits.iter().find(|h| h.1 == TriState::Yes) {
                    Some(h) => format!("via {}: {}", h.0.label(), h.2),
                    None => hits.iter().map(|h| format!("{}: {}", h.0.label(), h.2)).collect::<Vec<_>>().join("; "),
                };
                report(cond, holds, witness, holds, no)
            };
            let plus = xi([ConditionId::A1Plus, ConditionId::A2Plus], ConditionId::XiPlus);
            let minus = xi([ConditionId::A1Minus, ConditionId::A2Minus], ConditionId::XiMinus);
            out.insert(0, minus);
            out.insert(0, plus);
            out.push(report(ConditionId::LbPlus, no, "applies to lookback claims only", no, no));
            out.push(report(ConditionId::LbMinus, no, "applies to lookback claims only", no, no));
            let dz_witness = match combined {
                TriState::Yes => "first- and second-order sign pattern both hold",
                TriState::No => "no sign pattern holds at both orders",
                TriState::Indeterminate => "second derivatives are not available",
            };
            out.push(report(ConditionId::DzSecondOrder, combined, dz_witness, combined, combined));
            Ok(out)
        }
        TerminalSpec::Lookback { f } => {
            let fv = Sampled { name: "f", xs, values: Some(xs.iter().map(|&x| f.value(x)).collect()) };
            let f1 = sample("f'", f.first());
            let plus = sign_pattern(&[(&fv, Sign::Pos), (&f1, Sign::Neg)], &[(&f1, Sign::Neg)], false);
            let minus = sign_pattern(&[(&fv, Sign::Neg), (&f1, Sign::Pos)], &[(&f1, Sign::Pos)], false);
            let unknown = |h: TriState| if h == TriState::Yes { TriState::Indeterminate } else { h };
            let mut out = vec![
                report(ConditionId::XiPlus, plus.holds, format!("via lb+: {}", plus.witness), plus.holds, no),
                report(ConditionId::XiMinus, minus.holds, format!("via lb-: {}", minus.witness), minus.holds, no),
            ];
            for (id, _) in ASIAN_TABLE {
                out.push(report(id, no, "applies to asian claims only", no, no));
            }
            out.push(report(ConditionId::LbPlus, plus.holds, plus.witness, plus.holds, unknown(plus.holds)));
            out.push(report(ConditionId::LbMinus, minus.holds, minus.witness, minus.holds, unknown(minus.holds)));
            out.push(report(
                ConditionId::DzSecondOrder,
                TriState::Indeterminate,
                "the running maximum is not twice Malliavin differentiable",
                TriState::Indeterminate,
                TriState::Indeterminate,
            ));
            Ok(out)
        }
        other => {
            let why = format!("sign conditions apply to asian and lookback claims, not '{}'", other.kind());
            Ok(ConditionId::ALL.iter().map(|&id| report(id, no, why.clone(), no, no)).collect())
        }
    }
}

/// Whether the reports together guarantee densities of `Y_t` and `Z_t`.
pub fn guaranteed_densities(reports: &[ConditionReport]) -> (TriState, TriState) {
    let y = reports.iter().fold(TriState::No, |acc, r| acc.or(r.y_density));
    let z = reports.iter().fold(TriState::No, |acc, r| acc.or(r.z_density));
    (y, z)
}

/// `P(τ_T / T ≤ s) = (2/π) arcsin √s`.
pub fn arcsine_cdf<S: Scalar>(s: S) -> S {
    let s = s.max(S::zero()).min(S::one());
    S::of(2.0) / S::PI() * s.sqrt().asin()
}

/// Law of the first argmax index of a random walk with `n` symmetric
/// continuous steps: `P(j) = u_j u_{n-j}` with `u_k = C(2k, k) / 4^k`.
pub fn discrete_argmax_law(n: usize) -> Vec<f64> {
    let mut u = vec![1.0f64; n + 1];
    for k in 1..=n {
        u[k] = u[k - 1] * (2 * k - 1) as f64 / (2 * k) as f64;
    }
    (0..=n).map(|j| u[j] * u[n - j]).collect()
}

/// How the time of the maximum is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcsineMethod {
    /// Index of the largest grid value.
    Grid,
    /// Brownian-bridge maximum inside each cell, then its exact location
    /// within the winning cell.
    BridgeRefined,
}

/// Empirical law of `τ_T / T` against the arcsine law.
#[derive(Debug, Clone)]
pub struct ArcsineReport<S> {
    /// Sorted argmax fractions.
    pub fractions: Vec<S>,
    /// Two-sided Kolmogorov distance to the arcsine CDF.
    pub ks: S,
    /// 1% critical value `1.628 / √n` of the Kolmogorov distance.
    pub band: S,
    pub within_band: bool,
    /// Kolmogorov distance to the random-walk law, for the grid method only.
    pub discrete_ks: Option<S>,
}

/// Asymptotic 1% critical value of `√n · D_n`.
pub const KS_CRITICAL_1PCT: f64 = 1.628;

impl<S: Scalar> ArcsineReport<S> {
    /// Empirical CDF at `s`.
    pub fn ecdf(&self, s: S) -> S {
        let k = self.fractions.partition_point(|&x| x <= s);
        S::of_usize(k) / S::of_usize(self.fractions.len())
    }
}

/// Compares the argmax time of each path with the arcsine law.
pub fn arcsine_argmax_check<S: Scalar>(ens: &PathEnsemble<S>, method: ArcsineMethod) -> Result<ArcsineReport<S>> {
    let n = ens.n_paths();
    if n == 0 {
        return invalid("empty ensemble");
    }
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let indices: Vec<usize> = (0..n).into_par_iter().map(|p| argmax_index(ens.path(p))).collect();
    let mut fractions: Vec<S> = match method {
        ArcsineMethod::Grid => indices.iter().map(|&j| S::of_usize(j) / S::of_usize(n_steps)).collect(),
        ArcsineMethod::BridgeRefined => (0..n)
            .into_par_iter()
            .map(|p| {
                let mut rng = substream(ens.master_seed(), StreamTag::BridgeMaximum, p as u64);
                let t = bridge_argmax_fraction(ens.path(p), grid.dt().as_f64(), &mut rng);
                S::of(t / grid.horizon().as_f64())
            })
            .collect(),
    };
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));

    let ks = kolmogorov_distance(&fractions, |s| arcsine_cdf(s));
    let band = S::of(KS_CRITICAL_1PCT) / S::of_usize(n).sqrt();
    let discrete_ks = match method {
        ArcsineMethod::Grid => {
            let law = discrete_argmax_law(n_steps);
            let mut counts = vec![0usize; n_steps + 1];
            for &j in &indices {
                counts[j] += 1;
            }
            let (mut emp, mut cdf, mut d) = (0usize, 0.0f64, 0.0f64);
            for j in 0..=n_steps {
                emp += counts[j];
                cdf += law[j];
                d = d.max((emp as f64 / n as f64 - cdf).abs());
            }
            Some(S::of(d))
        }
        ArcsineMethod::BridgeRefined => None,
    };
    Ok(ArcsineReport { within_band: ks < band, fractions, ks, band, discrete_ks })
}

fn kolmogorov_distance<S: Scalar>(sorted: &[S], cdf: impl Fn(S) -> S) -> S {
    let n = S::of_usize(sorted.len());
    let mut d = S::zero();
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let above = S::of_usize(i + 1) / n - f;
        let below = f - S::of_usize(i) / n;
        d = d.max(above).max(below);
    }
    d
}

/// Time of the maximum of the Brownian path interpolating `w` by bridges.
///
/// Each cell's bridge maximum is drawn exactly from its conditional law; the
/// winning cell then gets the location of its maximum by inverting the
/// density of the argmax of a bridge with known maximum.
fn bridge_argmax_fraction<S: Scalar, R: Rng>(w: &[S], h: f64, rng: &mut R) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..w.len() - 1 {
        let (a, b) = (w[i].as_f64(), w[i + 1].as_f64());
        let u = 1.0 - rng.random::<f64>();
        let m = 0.5 * (a + b + ((b - a) * (b - a) - 2.0 * h * u.ln()).sqrt());
        if m > best.0 {
            best = (m, i);
        }
    }
    let (m, i) = best;
    let x = m - w[i].as_f64();
    let y = m - w[i + 1].as_f64();
    let u = rng.random::<f64>();
    (i as f64 + bridge_argmax_offset(x, y, h, u)) * h
}

/// Given a bridge over a cell of length `h` whose maximum sits `x` above the
/// left and `y` above the right endpoint, the maximum's relative location
/// `s` has density proportional to
/// `s^{-3/2} e^{-x²/(2hs)} (1-s)^{-3/2} e^{-y²/(2h(1-s))}`. Returns its
/// `u`-quantile, computed on a grid that is geometric towards both ends.
fn bridge_argmax_offset(x: f64, y: f64, h: f64, u: f64) -> f64 {
    const K: usize = 300;
    let alpha = x * x / (2.0 * h);
    let beta = y * y / (2.0 * h);
    let mut s = Vec::with_capacity(2 * K + 1);
    for k in 0..=K {
        s.push(0.5 * 10f64.powf(-12.0 + 12.0 * k as f64 / K as f64));
    }
    for k in (0..K).rev() {
        s.push(1.0 - s[k]);
    }
    let logd: Vec<f64> = s
        .iter()
        .map(|&v| -1.5 * v.ln() - alpha / v - 1.5 * (1.0 - v).ln() - beta / (1.0 - v))
        .collect();
    let top = logd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = logd.iter().map(|l| (l - top).exp()).collect();
    let mut cum = vec![0.0; s.len()];
    for k in 1..s.len() {
        cum[k] = cum[k - 1] + 0.5 * (dens[k] + dens[k - 1]) * (s[k] - s[k - 1]);
    }
    let target = u * cum[s.len() - 1];
    let k = cum.partition_point(|&c| c < target).clamp(1, s.len() - 1);
    let span = cum[k] - cum[k - 1];
    let frac = if span > 0.0 { (target - cum[k - 1]) / span } else { 0.5 };
    s[k - 1] + frac * (s[k] - s[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::SummaryRow;
    use crate::grid::{CameronMartinDirection, TimeGrid};
    use crate::sde::{shift_paths, simulate_brownian};
    use crate::terminal::SmoothFn;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ensemble(horizon: f64, n_steps: usize, n: usize, seed: u64) -> PathEnsemble<f64> {
        simulate_brownian(&TimeGrid::new(horizon, n_steps).unwrap(), n, seed).unwrap()
    }

    fn asian(f: &str, g: &str) -> TerminalSpec<f64> {
        TerminalSpec::Asian { f: SmoothFn::named(f).unwrap(), g: SmoothFn::named(g).unwrap() }
    }

    fn wt() -> TerminalSpec<f64> {
        TerminalSpec::AffineGaussian { c: 0.0, sigma2: 1.0 }
    }

    /// RMSE of Z against `exact(path, step)` and the root-mean-square slice SE.
    fn z_error(sol: &BsdeSolution<f64>, exact: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let (n, m) = (sol.z.rows(), sol.z.cols());
        let mut sq = 0.0;
        for i in 0..m {
            for p in 0..n {
                sq += (sol.z.get(p, i) - exact(p, i)).powi(2);
            }
        }
        let se2 = sol.z_slice_se.iter().map(|s| s * s).sum::<f64>() / m as f64;
        ((sq / (n * m) as f64).sqrt(), se2.sqrt())
    }

    #[test]
    fn deterministic_claim_is_discounted() {
        let ens = ensemble(2.0, 40, 500, 1);
        let claim = TerminalSpec::AffineGaussian { c: 3.0, sigma2: 0.0 };
        let spec = PricingSpec::new(VasicekParams::constant(0.05), Coeff::Constant(0.3), claim).unwrap();
        let sol = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(sol.y0, 3.0 * (-0.1f64).exp(), epsilon = 1e-12);
        for p in [0usize, 17, 499] {
            for i in 0..=40 {
                let want = 3.0 * (-0.05 * (2.0 - ens.grid().time(i))).exp();
                assert_abs_diff_eq!(sol.y.get(p, i), want, epsilon = 1e-12);
            }
        }
        assert!(sol.z.as_slice().iter().all(|z| z.abs() < 1e-10));
    }

    #[test]
    fn martingale_claim() {
        let ens = ensemble(1.0, 50, 2000, 2);
        let spec = PricingSpec::new(VasicekParams::constant(0.0), Coeff::Constant(0.0), wt()).unwrap();
        let sol = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        assert!(sol.y0.abs() < 3.0 * sol.y0_stderr);
        for i in 1..=50 {
            let err = (0..ens.n_paths()).map(|p| (sol.y.get(p, i) - ens.path(p)[i]).powi(2)).sum::<f64>() / 2000.0;
            assert!(err.sqrt() < 3.0 * sol.y_slice_se[i] + 1e-12, "step {i}");
        }
        let (rmse, se) = z_error(&sol, |_, _| 1.0);
        assert!(rmse < 3.0 * se, "rmse {rmse} se {se}");
    }

    #[test]
    fn risk_premium_shifts_the_price() {
        // Y_t = W_t - θ(T - t) satisfies dY = θ dt + dW = θZ dt + Z dW with Z = 1
        let (horizon, theta) = (1.0, 0.4);
        let ens = ensemble(horizon, 50, 20_000, 3);
        let spec = PricingSpec::new(VasicekParams::constant(0.0), Coeff::Constant(theta), wt()).unwrap();
        let sol = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        for i in [0usize, 10, 25, 40] {
            let t = ens.grid().time(i);
            let err: f64 = (0..ens.n_paths())
                .map(|p| (sol.y.get(p, i) - (ens.path(p)[i] - theta * (horizon - t))).powi(2))
                .sum::<f64>()
                / ens.n_paths() as f64;
            assert!(err.sqrt() < 5.0 * sol.y_slice_se[i].max(1e-3), "t={t} rmse {}", err.sqrt());
        }
        assert!((sol.y0 + theta * horizon).abs() < 3.0 * sol.y0_stderr.max(1e-3));
    }

    #[test]
    fn deterministic_rates_match_affine_discounting() {
        let ens = ensemble(1.0, 40, 3000, 4);
        let vasicek = VasicekParams::new(0.7, 0.06, 0.0, 0.02).unwrap();
        let claim = asian("exp-neg", "identity");
        let spec = PricingSpec::new(vasicek, Coeff::Constant(0.2), claim.clone()).unwrap();
        let sol = price_claim(&spec, &ens, SolverSettings::default()).unwrap();

        let rates: Vec<f64> = ens.grid().times().iter().map(|&t| -vasicek.mean(t)).collect();
        let rates_sim = simulate_vasicek(&vasicek, &ens).unwrap();
        for (i, r) in rates.iter().enumerate() {
            assert_abs_diff_eq!(-rates_sim.path(0)[i], *r, epsilon = 1e-12);
        }
        let sim_mu: Vec<f64> = rates_sim.path(0).iter().map(|r| -r).collect();
        let coeffs = AffineCoeffs::new(Coeff::zero(), Coeff::PerTime(sim_mu), Coeff::Constant(-0.2));
        let xi = payoffs(&claim, &ens);
        let state = RegressionState::for_terminal(&claim, &ens);
        let direct = solve_affine(&coeffs, &xi, &ens, &state, PolynomialBasis::default()).unwrap();
        assert_eq!(sol.y.as_slice(), direct.y.as_slice());
        assert_eq!(sol.z.as_slice(), direct.z.as_slice());
    }

    #[test]
    fn clark_ocone_martingale() {
        let ens = ensemble(1.0, 20, 500, 5);
        let spec = PricingSpec::new(VasicekParams::new(0.0, 0.0, 0.0, 0.0).unwrap(), Coeff::Constant(0.0), wt()).unwrap();
        let base = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        let co = clark_ocone_z(&spec, &base, &ens, SolverSettings::default()).unwrap();
        assert!(co.z.as_slice().iter().all(|z| (z - 1.0).abs() < 1e-12));
    }

    #[test]
    fn clark_ocone_constant_rate() {
        let r = 0.07;
        let ens = ensemble(2.0, 40, 500, 6);
        let spec = PricingSpec::new(VasicekParams::constant(r), Coeff::Constant(0.0), wt()).unwrap();
        let base = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        let co = clark_ocone_z(&spec, &base, &ens, SolverSettings::default()).unwrap();
        for i in 0..40 {
            let want = (-r * (2.0 - ens.grid().time(i))).exp();
            for p in 0..ens.n_paths() {
                assert_abs_diff_eq!(co.z.get(p, i), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn clark_ocone_agrees_with_regression_z() {
        let r = 0.05;
        let ens = ensemble(1.0, 50, 20_000, 7);
        let spec = PricingSpec::new(VasicekParams::constant(r), Coeff::Constant(0.0), wt()).unwrap();
        let base = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        let co = clark_ocone_z(&spec, &base, &ens, SolverSettings::default()).unwrap();
        let (mut sq, mut se2) = (0.0, 0.0);
        for i in 0..50 {
            for p in 0..ens.n_paths() {
                sq += (base.z.get(p, i) - co.z.get(p, i)).powi(2);
            }
            se2 += base.z_slice_se[i].powi(2) + co.slice_se[i].powi(2);
        }
        let rmse = (sq / (50.0 * ens.n_paths() as f64)).sqrt();
        let combined = (se2 / 50.0).sqrt();
        assert!(rmse < 3.0 * combined, "rmse {rmse} combined {combined}");
    }

    #[test]
    fn clark_ocone_with_random_rates_tracks_regression() {
        // ξ = W_T under Vasicek rates: both estimators of Z should agree on average
        let ens = ensemble(1.0, 40, 20_000, 8);
        let vasicek = VasicekParams::new(0.5, 0.04, 0.05, 0.03).unwrap();
        let spec = PricingSpec::new(vasicek, Coeff::Constant(0.1), wt()).unwrap();
        let base = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        let co = clark_ocone_z(&spec, &base, &ens, SolverSettings::default()).unwrap();
        for i in [5usize, 20, 35] {
            let a: f64 = base.z.column(i).iter().sum::<f64>() / ens.n_paths() as f64;
            let b: f64 = co.z.column(i).iter().sum::<f64>() / ens.n_paths() as f64;
            assert!((a - b).abs() < 0.03, "step {i}: {a} vs {b}");
        }
    }

    #[test]
    fn clark_ocone_rejects_random_theta() {
        let ens = ensemble(1.0, 10, 100, 9);
        let theta = Coeff::PerPath(Matrix::filled(100, 11, 0.1));
        let spec = PricingSpec::new(VasicekParams::constant(0.0), theta, wt()).unwrap();
        let base = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
        let err = clark_ocone_z(&spec, &base, &ens, SolverSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn positive_claims_have_positive_prices() {
        let ens = ensemble(1.0, 40, 5000, 10);
        let params = [(0.5, 0.05, 0.02, 0.03, 0.2), (2.0, -0.01, 0.1, 0.05, -0.5), (0.0, 0.0, 0.05, 0.0, 1.0)];
        for (a, b, varpi, r0, theta) in params {
            for claim in [asian("exp-neg", "identity"), TerminalSpec::Lookback { f: SmoothFn::named("put(0.5)").unwrap() }] {
                let spec = PricingSpec::new(VasicekParams::new(a, b, varpi, r0).unwrap(), Coeff::Constant(theta), claim).unwrap();
                let sol = price_claim(&spec, &ens, SolverSettings::default()).unwrap();
                let (min, at) = sol.min_y();
                let tol = 3.0 * sol.y_slice_se[at].max(sol.y0_stderr);
                assert!(min >= -tol, "min {min} at step {at}, tolerance {tol}");
                let rows: Vec<SummaryRow<f64>> = sol.summary();
                assert!(rows[0].mean_y > 0.0);
            }
        }
    }

    #[test]
    fn rate_sensitivity_matches_the_finite_difference() {
        // the discretized rate is linear in W, so the quotient is exact up to rounding
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let ens = simulate_brownian(&grid, 10, 11).unwrap();
        let eps = 1e-4;
        let shifted = shift_paths(&ens, &CameronMartinDirection::constant(1.0), eps);
        for a in [1.5f64, 0.3, 1e-3] {
            let v = VasicekParams::new(a, 0.05, 0.2, 0.01).unwrap();
            let base = simulate_vasicek(&v, &ens).unwrap();
            let bumped = simulate_vasicek(&v, &shifted).unwrap();
            for i in [50usize, 120, 200] {
                let t = grid.time(i);
                let fd = (bumped.path(3)[i] - base.path(3)[i]) / eps;
                let closed = 0.2 * (1.0 - (-a * t).exp()) / a;
                assert!((fd - closed).abs() < 1e-2 * closed, "a={a} t={t}: {fd} vs {closed}");
            }
        }
        // the mean-reversion factor disappears as a → 0: D_u r_t → ϖ
        let v = VasicekParams::new(1e-9, 0.0, 0.2, 0.0).unwrap();
        assert_abs_diff_eq!(v.malliavin(0.1, 0.9), 0.2, epsilon = 1e-9);
    }

    fn find(reports: &[ConditionReport], id: ConditionId) -> &ConditionReport {
        reports.iter().find(|r| r.condition == id).unwrap()
    }

    fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn exp_neg_asian_satisfies_a2_plus() {
        let reports = check_density_conditions(&asian("exp-neg", "identity"), &linspace(-5.0, 5.0, 201)).unwrap();
        assert_eq!(reports.len(), 9);
        let a2 = find(&reports, ConditionId::A2Plus);
        assert_eq!(a2.holds, TriState::Yes);
        assert_eq!((a2.y_density, a2.z_density), (TriState::Yes, TriState::Yes));
        assert_eq!(find(&reports, ConditionId::XiPlus).holds, TriState::Yes);
        assert_eq!(find(&reports, ConditionId::DzSecondOrder).holds, TriState::Yes);
        for id in [ConditionId::A1Plus, ConditionId::A1Minus, ConditionId::A2Minus, ConditionId::XiMinus] {
            assert_eq!(find(&reports, id).holds, TriState::No, "{}", id.label());
        }
        assert_eq!(guaranteed_densities(&reports), (TriState::Yes, TriState::Yes));
    }

    #[test]
    fn lookback_put_gives_only_y() {
        let claim = TerminalSpec::Lookback { f: SmoothFn::named("put(1)").unwrap() };
        let reports = check_density_conditions(&claim, &linspace(-5.0, 5.0, 201)).unwrap();
        let lb = find(&reports, ConditionId::LbPlus);
        assert_eq!(lb.holds, TriState::Yes);
        assert_eq!((lb.y_density, lb.z_density), (TriState::Yes, TriState::Indeterminate));
        assert_eq!(find(&reports, ConditionId::LbMinus).holds, TriState::No);
        assert_eq!(guaranteed_densities(&reports), (TriState::Yes, TriState::Indeterminate));
    }

    #[test]
    fn identity_asian_satisfies_nothing() {
        let reports = check_density_conditions(&asian("identity", "identity"), &linspace(-5.0, 5.0, 201)).unwrap();
        assert!(reports.iter().all(|r| r.holds == TriState::No), "{reports:?}");
        assert_eq!(guaranteed_densities(&reports), (TriState::No, TriState::No));
        assert!(find(&reports, ConditionId::A1Minus).witness.contains("f <= 0 fails"));
    }

    #[test]
    fn missing_derivative_is_indeterminate() {
        let f = SmoothFn::new("opaque", |x: f64| (-x).exp());
        let claim = TerminalSpec::Asian { f, g: SmoothFn::named("identity").unwrap() };
        let reports = check_density_conditions(&claim, &linspace(-2.0, 2.0, 50)).unwrap();
        let a2 = find(&reports, ConditionId::A2Plus);
        assert_eq!(a2.holds, TriState::Indeterminate);
        assert!(a2.witness.contains("f' is not available"));
    }

    #[test]
    fn strictness_needs_one_percent_of_points() {
        // f' < 0 only on a sliver of the sample
        let f = SmoothFn::new("sliver", |x: f64| if x < -4.99 { 1.0 - (x + 4.99) } else { 1.0 })
            .with_first(|x: f64| if x < -4.99 { -1.0 } else { 0.0 });
        let claim = TerminalSpec::Lookback { f };
        let reports = check_density_conditions(&claim, &linspace(-5.0, 5.0, 1001)).unwrap();
        assert_eq!(find(&reports, ConditionId::LbPlus).holds, TriState::No);
    }

    #[test]
    fn other_claims_are_not_covered() {
        let reports = check_density_conditions(&wt(), &[0.0, 1.0]).unwrap();
        assert!(reports.iter().all(|r| r.holds == TriState::No));
        assert!(check_density_conditions(&wt(), &[]).is_err());
    }

    proptest! {
        #[test]
        fn reports_are_scale_invariant(c in 1e-3f64..1e3, which in 0usize..4) {
            let grid = linspace(-5.0, 5.0, 101);
            let (f, g) = [("exp-neg", "identity"), ("identity", "identity"), ("exp", "neg"), ("put(1)", "square")][which];
            let base = asian(f, g);
            let scaled = TerminalSpec::Asian {
                f: SmoothFn::named(f).unwrap().scaled(c),
                g: SmoothFn::named(g).unwrap(),
            };
            let r0 = check_density_conditions(&base, &grid).unwrap();
            let r1 = check_density_conditions(&scaled, &grid).unwrap();
            prop_assert_eq!(r0, r1);
            let lb0 = check_density_conditions(&TerminalSpec::Lookback { f: SmoothFn::named(f).unwrap() }, &grid).unwrap();
            let lb1 = check_density_conditions(&TerminalSpec::Lookback { f: SmoothFn::named(f).unwrap().scaled(c) }, &grid).unwrap();
            prop_assert_eq!(lb0, lb1);
        }
    }

    #[test]
    fn payoff_examples() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let w = Matrix::from_vec(1, 5, vec![0.0, 1.2, 1.7, 0.3, -0.5]).unwrap();
        let ens = PathEnsemble::from_paths(grid, w, 0).unwrap();
        let lb = TerminalSpec::Lookback { f: SmoothFn::named("identity").unwrap() };
        assert_eq!(lookback_payoff(&lb, &ens).unwrap(), vec![1.7]);
        assert!(asian_payoff(&lb, &ens).is_err());

        let grid = TimeGrid::new(2.0, 8).unwrap();
        let ones = PathEnsemble::from_paths(grid.clone(), Matrix::filled(1, 9, 1.0), 0).unwrap();
        assert_abs_diff_eq!(asian_payoff(&asian("identity", "square"), &ones).unwrap()[0], 2.0, epsilon = 1e-12);
        assert!(lookback_payoff(&asian("identity", "square"), &ones).is_err());

        let ens = simulate_brownian(&grid, 50, 12).unwrap();
        let call = asian_payoff(&asian("call(0)", "identity"), &ens).unwrap();
        for (p, v) in call.iter().enumerate() {
            assert_eq!(*v, grid.integrate(ens.path(p)).max(0.0));
        }
    }

    #[test]
    fn arcsine_law_values() {
        assert_abs_diff_eq!(arcsine_cdf(0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(arcsine_cdf(0.25), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(arcsine_cdf(0.0), 0.0);
        assert_abs_diff_eq!(arcsine_cdf(1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn discrete_law_is_a_distribution() {
        for n in [1usize, 2, 5, 40] {
            let law = discrete_argmax_law(n);
            assert_abs_diff_eq!(law.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        // one step: the max is at either end with probability 1/2
        assert_eq!(discrete_argmax_law(1), vec![0.5, 0.5]);
        // two steps: 3/8, 1/4, 3/8
        assert_eq!(discrete_argmax_law(2), vec![0.375, 0.25, 0.375]);
    }

    #[test]
    fn grid_argmax_follows_the_random_walk_law() {
        let ens = ensemble(1.0, 20, 20_000, 13);
        let rep = arcsine_argmax_check(&ens, ArcsineMethod::Grid).unwrap();
        let d = rep.discrete_ks.unwrap();
        assert!(d < 1.628 / (20_000f64).sqrt(), "discrete ks {d}");
        // a coarse grid is visibly far from the continuous law
        assert!(!rep.within_band);
    }

    #[test]
    fn refined_argmax_follows_the_arcsine_law() {
        let n = 20_000;
        let ens = ensemble(1.0, 20, n, 14);
        let rep = arcsine_argmax_check(&ens, ArcsineMethod::BridgeRefined).unwrap();
        assert!(rep.within_band, "ks {} band {}", rep.ks, rep.band);
        let half = rep.ecdf(0.5);
        assert!((half - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "ecdf(1/2) = {half}");
        assert!(rep.fractions.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn bridge_offset_is_symmetric() {
        for u in [0.1, 0.37, 0.5, 0.9] {
            let a = bridge_argmax_offset(0.2, 0.05, 0.01, u);
            let b = bridge_argmax_offset(0.05, 0.2, 0.01, 1.0 - u);
            assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(bridge_argmax_offset(0.1, 0.1, 0.01, 0.5), 0.5, epsilon = 1e-9);
    }
}
