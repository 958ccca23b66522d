//! Harness around `lot-core`: configuration, subcommands and the gradient
//! check, shared by the `lot` binary and the integration tests.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;

pub use config::{ReferenceSpec, RunConfig};
pub use error::{CliError, CliResult};

/// Runs `f` on a thread pool with `workers` threads (0 = all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::bad(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
