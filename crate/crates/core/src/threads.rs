//! Worker-pool sizing.
//!
//! Every reduction in this crate runs in a fixed order, so results are
//! bit-identical for any pool size; the pool only controls how much of the
//! work happens concurrently. The size comes from [`configure`] if called
//! before first use, else the `MDCS_THREADS` environment variable, else 1.

use std::sync::OnceLock;

use rayon::ThreadPool;

static POOL: OnceLock<ThreadPool> = OnceLock::new();
static REQUESTED: OnceLock<usize> = OnceLock::new();

/// Requests a worker count before the pool is first used. Returns `false`
/// if a count was already fixed.
pub fn configure(n: usize) -> bool {
    REQUESTED.set(n.max(1)).is_ok()
}

/// The shared worker pool.
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let n = REQUESTED.get().copied().unwrap_or_else(|| {
            std::env::var("MDCS_THREADS")
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(1)
        });
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("failed to build worker pool")
    })
}
