use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndm_cli::config::reference_config;
use ndm_cli::{configure_threads, run, CliError, RunConfig};

/// Neural density-matrix simulation of dissipative spin chains.
#[derive(Parser)]
#[command(name = "ndm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run described by a TOML configuration.
    Run { config: PathBuf },
    /// Check a configuration and print it with all defaults filled in.
    Validate { config: PathBuf },
    /// Print a commented configuration with every default.
    DefaultConfig,
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let threads = configure_threads(cfg.threads)?;
            log::info!("using {threads} worker threads");
            let summary = run(&cfg)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", reference_config());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
