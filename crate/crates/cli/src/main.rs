//! `mfg`: batch front end for the mean field game solver.
//!
//! Exit codes: 0 converged (or success), 2 budget exhausted or oscillating,
//! 3 invalid config, input or subcommand, 4 CFL violation, 1 other failures.
//! Every error also prints one JSON line on stderr.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, EXIT_INVALID};

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Relaxed-control mean field game solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Iterate the best-response map to an equilibrium and write the run artifacts.
    Solve { config: PathBuf },
    /// Apply the best-response map once to a flow dump.
    BestResponse { config: PathBuf, flow: PathBuf },
    /// Solve an LQ config and compare with the closed-form equilibrium.
    LqCheck { config: PathBuf },
    /// Sample the growth bounds and probe convexity of the control set.
    Validate { config: PathBuf },
    /// Wasserstein distance between two measure dumps.
    Wasserstein {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long, default_value_t = 1.0)]
        p: f64,
    },
}

fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Solve { config } => commands::solve(&config),
        Command::BestResponse { config, flow } => commands::best_response_cmd(&config, &flow),
        Command::LqCheck { config } => commands::lq_check(&config),
        Command::Validate { config } => commands::validate(&config),
        Command::Wasserstein { a, b, p } => commands::wasserstein_cmd(&a, &b, p),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("bad arguments");
            let line = serde_json::json!({
                "error": "usage",
                "exit_code": EXIT_INVALID,
                "message": first.trim_start_matches("error: "),
            });
            eprintln!("{line}");
            return ExitCode::from(EXIT_INVALID as u8);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
