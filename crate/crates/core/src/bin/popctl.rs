use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use popctl::cli::{run_command, Command, RunOptions};
use popctl::config::parse_config;
use popctl::error::exit;

#[derive(Debug, Parser)]
#[command(name = "popctl", version, about = "Null-control experiments for a degenerate age-size-space population model")]
struct Args {
    /// One of: validate, simulate, adjoint, char-check, vanish-check, hum,
    /// obs-scan, threshold-scan, propo1-check.
    command: String,
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Maximum number of worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(cmd) = Command::parse(&args.command) else {
        let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
        eprintln!("error: unknown command `{}`; expected one of {}", args.command, names.join(", "));
        return ExitCode::from(exit::USAGE as u8);
    };
    let cfg = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let opts = RunOptions {
        jobs: args.jobs,
        seed: args.seed,
    };
    match run_command(cmd, &cfg, &opts) {
        Ok(out) => {
            println!("{}: {}", cmd.name(), out.summary);
            println!("artifacts in {}", out.output_dir.display());
            if out.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::CHECK_FAILED as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
