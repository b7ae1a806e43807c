//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work runs on rayon; without it, or when
//! [`Exec::Sequential`] is requested, items are processed in order on the caller's
//! thread. Output order always follows input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a data-parallel stage is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Every available core.
    #[default]
    Parallel,
    /// A dedicated pool of this many workers.
    Workers(usize),
}

impl Exec {
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            0 => Exec::Parallel,
            1 => Exec::Sequential,
            n => Exec::Workers(n),
        }
    }

    /// Caps concurrency at `limit` (a backend's declared maximum).
    pub fn limited(self, limit: Option<usize>) -> Self {
        match (self, limit) {
            (_, Some(1)) => Exec::Sequential,
            (Exec::Parallel, Some(n)) => Exec::Workers(n),
            (Exec::Workers(w), Some(n)) => Exec::Workers(w.min(n)),
            (e, _) => e,
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            match self {
                Exec::Sequential => items.iter().map(f).collect(),
                Exec::Parallel => items.par_iter().map(f).collect(),
                Exec::Workers(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                    Err(_) => items.iter().map(f).collect(),
                },
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(f).collect()
        }
    }
}
