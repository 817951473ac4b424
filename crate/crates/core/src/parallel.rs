//! Fan-out for pair-local work.
//!
//! Each task writes exactly one output slot and reductions happen afterwards in
//! index order, so the worker count never changes the numbers.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub struct Executor {
    pool: Option<rayon::ThreadPool>,
    workers: usize,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        match workers {
            0 => Err(Error::InvalidConfig("workers must be >= 1".into())),
            1 => Ok(Self::sequential()),
            n => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
                Ok(Self {
                    pool: Some(pool),
                    workers: n,
                })
            }
        }
    }

    pub fn sequential() -> Self {
        Self {
            pool: None,
            workers: 1,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `(0..n).map(f)` with results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    /// Like [`map`](Self::map) but stops at the first error in index order.
    pub fn try_map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}
