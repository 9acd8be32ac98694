//! Experiment orchestration: random streams, replica parallelism,
//! statistics, persistence and the verification suites.

pub mod config;
pub mod experiments;
pub mod results;
pub mod rng;
pub mod stats;
pub mod tolerances;
pub mod verify;

use std::sync::OnceLock;

use rayon::prelude::*;

pub use rng::{split_stream, Provenance, RngStream};
pub use stats::{fit_loglog, summarize, FitMode, LineFit, Summary};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "MEMBRANE_LAB_THREADS";

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            b = b.num_threads(n.max(1));
        }
        b.build().expect("thread pool")
    })
}

/// Runs `f(replica)` for every replica and returns results in replica
/// order, so downstream reductions do not depend on scheduling.
pub fn par_replicas<T, F>(replicas: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    pool().install(|| (0..replicas).into_par_iter().map(&f).collect())
}

/// Fallible variant of [`par_replicas`]; the first error by replica order
/// wins.
pub fn try_par_replicas<T, F>(replicas: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync + Send,
{
    par_replicas(replicas, f).into_iter().collect()
}

/// Runs `f` on a private pool of `threads` workers (used to check that
/// results do not depend on the worker count).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}
