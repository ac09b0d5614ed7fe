use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cto_lab::cli::{parse_config, run_pipeline, Command};

/// Calibration to target outcomes.
#[derive(Parser)]
#[command(name = "cto-lab", version, about)]
struct Args {
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = parse_config(&args.config)
        .and_then(|cfg| cfg.for_command(args.command, args.seed, args.out))
        .and_then(|cfg| run_pipeline(&cfg));
    match result {
        Ok(outcome) => {
            for file in &outcome.files {
                println!("{}", outcome.out.join(file).display());
            }
            if outcome.converged {
                ExitCode::SUCCESS
            } else {
                for d in &outcome.diagnostics {
                    eprintln!("not converged: {d}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
