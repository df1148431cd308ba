//! JSON experiment configuration.

use std::path::PathBuf;

use bsde_density::bsde::{Coeff, SolverSettings};
use bsde_density::finance::PricingSpec;
use bsde_density::gene::GeneParams;
use bsde_density::grid::{CameronMartinDirection, TimeGrid};
use bsde_density::regression::PolynomialBasis;
use bsde_density::sde::VasicekParams;
use bsde_density::terminal::{SmoothFn, TerminalSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One experiment per file. The `experiment` tag selects the variant; the
/// remaining top-level fields are shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub experiment: Experiment,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Experiment {
    GeneDensity(GeneDensityConfig),
    GeneValidate(GeneValidateConfig),
    PriceAsian(PriceAsianConfig),
    PriceLookback(PriceLookbackConfig),
    CheckConditions(CheckConditionsConfig),
    ArcsineCheck(ArcsineConfig),
    FdCheck(FdCheckConfig),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::GeneDensity(_) => "gene-density",
            Experiment::GeneValidate(_) => "gene-validate",
            Experiment::PriceAsian(_) => "price-asian",
            Experiment::PriceLookback(_) => "price-lookback",
            Experiment::CheckConditions(_) => "check-conditions",
            Experiment::ArcsineCheck(_) => "arcsine-check",
            Experiment::FdCheck(_) => "fd-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, n_steps: 100 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid<f64>, CliError> {
        Ok(TimeGrid::new(self.horizon, self.n_steps)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_picard")]
    pub n_picard: usize,
}

fn default_degree() -> usize {
    3
}

fn default_picard() -> usize {
    1
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { degree: default_degree(), n_picard: default_picard() }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings { basis: PolynomialBasis::new(self.degree), n_picard: self.n_picard }
    }
}

/// Terminal condition; function names go through the library's registry
/// (`identity`, `exp-neg`, `put(K)`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerminalConfig {
    AffineGaussian { c: f64, sigma2: f64 },
    PathIntegral { alpha: f64, beta: f64, gamma: f64 },
    Asian { f: String, g: String },
    Lookback { f: String },
}

impl TerminalConfig {
    pub fn build(&self) -> Result<TerminalSpec<f64>, CliError> {
        Ok(match self {
            TerminalConfig::AffineGaussian { c, sigma2 } => TerminalSpec::AffineGaussian { c: *c, sigma2: *sigma2 },
            TerminalConfig::PathIntegral { alpha, beta, gamma } => {
                TerminalSpec::PathIntegral { alpha: *alpha, beta: *beta, gamma: *gamma }
            }
            TerminalConfig::Asian { f, g } => TerminalSpec::Asian { f: SmoothFn::named(f)?, g: SmoothFn::named(g)? },
            TerminalConfig::Lookback { f } => TerminalSpec::Lookback { f: SmoothFn::named(f)? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneModel {
    #[serde(rename = "R")]
    pub activation: f64,
    pub a: f64,
    pub rho: f64,
    pub terminal: TerminalConfig,
}

impl GeneModel {
    pub fn build(&self) -> Result<GeneParams<f64>, CliError> {
        Ok(GeneParams::new(self.activation, self.a, self.rho, self.terminal.build()?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneDensityConfig {
    pub model: GeneModel,
    pub times: Vec<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Points of each exported bound curve.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

fn default_bins() -> usize {
    60
}

fn default_curve_points() -> usize {
    401
}

/// Either a gene-model run sampled at `times`, or an existing samples CSV
/// with one column per sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneValidateConfig {
    #[serde(default)]
    pub model: Option<GeneModel>,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VasicekConfig {
    pub a: f64,
    pub b: f64,
    pub varpi: f64,
    pub r0: f64,
}

impl VasicekConfig {
    pub fn build(&self) -> Result<VasicekParams<f64>, CliError> {
        Ok(VasicekParams::new(self.a, self.b, self.varpi, self.r0)?)
    }
}

/// Points at which the sign conditions are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { lo: -5.0, hi: 5.0, n: 201 }
    }
}

impl SampleGrid {
    pub fn points(&self) -> Result<Vec<f64>, CliError> {
        if self.n < 2 || !(self.hi > self.lo) {
            return Err(CliError::Config(format!(
                "sample grid needs n >= 2 and hi > lo, got n={} on [{}, {}]",
                self.n, self.lo, self.hi
            )));
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        Ok((0..self.n).map(|k| self.lo + step * k as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceAsianConfig {
    pub vasicek: VasicekConfig,
    /// Constant market price of risk.
    #[serde(default)]
    pub theta: f64,
    pub f: String,
    pub g: String,
    #[serde(default)]
    pub sample_grid: SampleGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceLookbackConfig {
    pub vasicek: VasicekConfig,
    #[serde(default)]
    pub theta: f64,
    pub f: String,
    #[serde(default)]
    pub sample_grid: SampleGrid,
}

pub(crate) fn pricing_spec(vasicek: &VasicekConfig, theta: f64, claim: TerminalSpec<f64>) -> Result<PricingSpec<f64>, CliError> {
    if !theta.is_finite() {
        return Err(CliError::Config(format!("theta must be finite, got {theta}")));
    }
    Ok(PricingSpec::new(vasicek.build()?, Coeff::Constant(theta), claim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConditionsConfig {
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub sample_grid: SampleGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ArcsineMethodConfig {
    Grid,
    #[default]
    BridgeRefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcsineConfig {
    #[serde(default)]
    pub method: ArcsineMethodConfig,
    /// Points of the exported CDF comparison.
    #[serde(default = "default_cdf_points")]
    pub cdf_points: usize,
}

fn default_cdf_points() -> usize {
    101
}

/// Generator `λ + μ y + ν z` with constant coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineConfig {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DirectionConfig {
    /// ḣ ≡ c.
    Constant { c: f64 },
    /// ḣ = 1 on [0, cutoff].
    IndicatorUntil { cutoff: f64 },
}

impl DirectionConfig {
    pub fn build(&self) -> CameronMartinDirection<f64> {
        match *self {
            DirectionConfig::Constant { c } => CameronMartinDirection::constant(c),
            DirectionConfig::IndicatorUntil { cutoff } => CameronMartinDirection::indicator_until(cutoff),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheckConfig {
    pub generator: AffineConfig,
    pub terminal: TerminalConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_direction")]
    pub direction: DirectionConfig,
}

fn default_eps() -> f64 {
    1e-4
}

fn default_direction() -> DirectionConfig {
    DirectionConfig::Constant { c: 1.0 }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_paths == 0 {
            return Err(CliError::Config("n_paths must be positive".into()));
        }
        if self.solver.n_picard == 0 {
            return Err(CliError::Config("solver.n_picard must be at least 1".into()));
        }
        self.grid.build()?;
        Ok(())
    }
}
