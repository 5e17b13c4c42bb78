//! Configuration, orchestration and output files of the `ndm` command.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{Mode, RunConfig};
pub use error::CliError;
pub use run::{run, RunSummary};

/// Environment variable that overrides the `threads` setting.
pub const THREADS_ENV: &str = "NDM_THREADS";

/// Size the global worker pool from `NDM_THREADS`, else from the config.
/// Zero means one thread per core. Only the first call has an effect.
pub fn configure_threads(config_threads: usize) -> Result<usize, CliError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        Err(_) => config_threads,
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(rayon::current_num_threads())
}
