//! Command-line experiments for hierarchical neural posterior estimation:
//! configuration, run directories with manifests, recording ingestion and
//! figure output.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod ingest;
pub mod manifest;

pub use error::{CliError, CliResult};

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "HNPE_WORKERS";

/// Sizes the global thread pool from [`WORKERS_ENV`] when it is set.
pub fn init_workers() -> CliResult<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}
