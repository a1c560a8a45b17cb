//! Worker-count control for the parallel residual evaluation.

use crate::error::Result;

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`. Without the `parallel` feature `f` simply runs
/// on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| crate::error::Error::Solver(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    Ok(f())
}
