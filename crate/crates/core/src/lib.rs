//! Monte Carlo BSDE solvers with Malliavin density bounds.
//!
//! Everything is generic over the floating-point type through [`Scalar`];
//! the aliases below fix it to `f64` (and a few to `f32`).
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod bsde;
pub mod error;
pub mod finance;
pub mod gene;
pub mod grid;
pub mod malliavin;
pub mod regression;
pub mod scalar;
pub mod sde;
pub mod stats;
pub mod terminal;

pub use bsde::{solve_affine, solve_lsmc, AffineCoeffs, Coeff, FnGenerator, Generator, PathPoint, SolverSettings};
pub use error::{Error, Result};
pub use regression::{conditional_regress, PolynomialBasis, RegressionState};
pub use scalar::Scalar;
pub use sde::{simulate_brownian, simulate_vasicek, StreamTag};

pub type Matrix64 = grid::Matrix<f64>;
pub type TimeGrid64 = grid::TimeGrid<f64>;
pub type PathEnsemble64 = grid::PathEnsemble<f64>;
pub type Direction64 = grid::CameronMartinDirection<f64>;
pub type TerminalSpec64 = terminal::TerminalSpec<f64>;
pub type SmoothFn64 = terminal::SmoothFn<f64>;
pub type BsdeSolution64 = bsde::BsdeSolution<f64>;
pub type VasicekParams64 = sde::VasicekParams<f64>;
pub type GeneParams64 = gene::GeneParams<f64>;
pub type PricingSpec64 = finance::PricingSpec<f64>;
pub type DensityBoundParams64 = malliavin::DensityBoundParams<f64>;
pub type TestReport64 = stats::TestReport<f64>;

pub type TimeGrid32 = grid::TimeGrid<f32>;
pub type PathEnsemble32 = grid::PathEnsemble<f32>;
pub type BsdeSolution32 = bsde::BsdeSolution<f32>;
