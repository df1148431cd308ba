//! Config-driven experiment runner for `bsde-density`.
//!
//! A run reads one JSON config, executes the named experiment and writes CSV
//! and JSON artifacts plus a `manifest.json` listing them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;

use serde_json::json;
use thiserror::Error;

pub use config::{Experiment, ExperimentConfig};
pub use experiments::run;
pub use output::{emit_csv, read_csv, Manifest, Table};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Model(#[from] bsde_density::Error),
    #[error("{experiment}: {source}")]
    Experiment {
        experiment: String,
        #[source]
        source: Box<CliError>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn in_experiment(self, name: &str) -> Self {
        CliError::Experiment { experiment: name.to_string(), source: Box::new(self) }
    }

    fn root(&self) -> &CliError {
        match self {
            CliError::Experiment { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            CliError::Config(_) => "config",
            CliError::Model(e) => match e {
                bsde_density::Error::InvalidParameter(_) => "invalid-parameter",
                bsde_density::Error::ShapeMismatch(_) => "shape-mismatch",
                bsde_density::Error::Unsupported(_) => "unsupported",
                bsde_density::Error::Numeric(_) => "numeric",
                bsde_density::Error::SingularRegression { .. } => "singular-regression",
                bsde_density::Error::Domain(_) => "domain",
                bsde_density::Error::DegenerateSample(_) => "degenerate-sample",
            },
            CliError::Io(_) => "io",
            CliError::Csv(_) => "csv",
            CliError::Experiment { .. } => unreachable!("root is never an experiment wrapper"),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.root() {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Csv(_) => 3,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let experiment = match self {
            CliError::Experiment { experiment, .. } => Some(experiment.as_str()),
            _ => None,
        };
        json!({ "error": { "kind": self.kind(), "experiment": experiment, "message": self.to_string() } }).to_string()
    }
}
