use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bsde_density_cli::{run, CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Monte Carlo BSDE experiments.
///
/// Worker threads default to all cores; set RAYON_NUM_THREADS or --threads to
/// change that. Results do not depend on the thread count.
#[derive(Parser)]
#[command(name = "bsde-density", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, threads } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            let text = fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let manifest = run(&cfg, &dir)?;
            println!("{}", serde_json::to_string(&manifest).expect("manifest serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
