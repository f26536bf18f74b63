//! Worker configuration for the data-parallel loops.
//!
//! Zero workers is the deterministic single-worker mode. With the `parallel`
//! feature and more than one worker, independent items (batch examples,
//! ScoreCAM masked passes, images) are spread over a rayon pool. Results are
//! always collected in item order and reduced sequentially afterwards, so
//! both modes produce bit-identical numbers.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable read by [`workers_from_env`].
pub const THREADS_ENV: &str = "LEAFSCOPE_THREADS";

static WORKERS: AtomicUsize = AtomicUsize::new(0);

/// Sets the number of workers; 0 or 1 selects the sequential path.
pub fn set_workers(n: usize) {
    WORKERS.store(n, Ordering::SeqCst);
}

pub fn workers() -> usize {
    WORKERS.load(Ordering::SeqCst)
}

/// Reads the worker cap from `LEAFSCOPE_THREADS`; unset or unparsable is 0.
pub fn workers_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// True when [`map_indexed`] will actually fan out.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && workers() > 1
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers() > 1 && n > 1 {
            return pool::run(workers(), n, f);
        }
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but short-circuits on the first error in index order.
pub fn try_map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    if !is_parallel() {
        return (0..n).map(f).collect();
    }
    map_indexed(n, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
mod pool {
    use rayon::prelude::*;
    use std::sync::{Arc, Mutex};

    static POOL: Mutex<Option<(usize, Arc<rayon::ThreadPool>)>> = Mutex::new(None);

    fn get(threads: usize) -> Arc<rayon::ThreadPool> {
        let mut slot = POOL.lock().unwrap_or_else(|e| e.into_inner());
        match slot.as_ref() {
            Some((n, pool)) if *n == threads => pool.clone(),
            _ => {
                let pool = Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .expect("failed to build worker pool"),
                );
                *slot = Some((threads, pool.clone()));
                pool
            }
        }
    }

    pub(super) fn run<R, F>(threads: usize, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        // Nested calls stay on the current pool.
        if rayon::current_thread_index().is_some() {
            return (0..n).into_par_iter().map(f).collect();
        }
        get(threads).install(|| (0..n).into_par_iter().map(f).collect())
    }
}
