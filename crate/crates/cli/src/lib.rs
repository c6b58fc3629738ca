//! Library side of the `difflane` binary, so tests can drive commands
//! without spawning processes.

pub mod commands;
pub mod config;
pub mod draw;

pub use config::{Overrides, RunConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DIFFLANE_THREADS";

/// Applies `DIFFLANE_THREADS` to the tensor backend's thread pool. Must run
/// before the first tensor operation.
pub fn apply_thread_cap() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize =
        raw.trim().parse().map_err(|_| anyhow::anyhow!("{THREADS_ENV}={raw:?} is not a positive integer"))?;
    if n == 0 {
        anyhow::bail!("{THREADS_ENV} must be at least 1");
    }
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    Ok(Some(n))
}
