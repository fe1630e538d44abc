//! `oedct`: offline design, error studies, correlation-length estimation and
//! the interactive session service.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oedct::targets::Criterion;

#[derive(Debug, Parser)]
#[command(name = "oedct", version, about = "Sequential Bayesian design of X-ray projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output` or `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for candidate sweeps and replications.
    #[arg(long, env = "OEDCT_THREADS")]
    threads: Option<usize>,
    /// Overrides the design criterion.
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<Criterion>,
    /// Overrides the number of projections K.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy offline design: writes P.csv, targets.csv and landscapes.
    Design {
        #[command(flatten)]
        common: Common,
        /// Also dump the final posterior standard deviation as PGM.
        #[arg(long)]
        maps: bool,
    },
    /// Reconstruction-error study of optimal and random policies.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replications: Option<usize>,
        /// Random design sequences for the random policy.
        #[arg(long)]
        sequences: Option<usize>,
        /// Comma-separated subset of A, D, random.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
    },
    /// Correlation-length estimation along the adaptive design loop.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Simulate targets with a random true correlation length.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        simulate: bool,
        /// Directory with P.csv and y_01.csv, y_02.csv, ... measured data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also produce reconstructions with the fixed initial guess.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Runs the HTTP session service.
    Serve {
        /// Configuration used when a creation request has an empty body.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, env = "OEDCT_THREADS")]
        threads: Option<usize>,
    },
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: oedct::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
