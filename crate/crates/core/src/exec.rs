//! Bounded data-parallel execution.
//!
//! With the `parallel` feature, work fans out over a dedicated rayon pool whose
//! width is the configured concurrency limit. Without it, everything runs in
//! order on the calling thread. Results always come back in input order.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Default)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("width", &self.width())
            .finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor::default()
    }

    /// A pool with at most `limit` concurrent tasks. Falls back to sequential
    /// execution when the feature is off or `limit <= 1`.
    pub fn bounded(limit: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if limit > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(limit)
                    .thread_name(|i| format!("cycle-reward-{i}"))
                    .build()
                    .expect("failed to build worker pool");
                return Executor {
                    pool: Some(Arc::new(pool)),
                };
            }
        }
        let _ = limit;
        Executor::sequential()
    }

    pub fn width(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}

/// Maps over the global rayon pool when available. For CPU-bound batch work
/// that does not touch a backend.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
