//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work runs on a rayon pool sized to
//! the requested parallelism. Without it, or with `Execution::Sequential`,
//! items are processed in order on the calling thread.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    Parallel { threads: usize },
}

impl Default for Execution {
    fn default() -> Self {
        Execution::Parallel { threads: 8 }
    }
}

impl Execution {
    pub fn with_parallelism(threads: usize) -> Self {
        if threads <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { threads }
        }
    }

    /// Map `f` over `items`, preserving order. The first error wins.
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        match self {
            Execution::Parallel { threads } if threads > 1 && items.len() > 1 => {
                parallel_try_map(threads, items, f)
            }
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.try_map(items, |t| Ok::<R, std::convert::Infallible>(f(t)))
            .unwrap_or_else(|never| match never {})
    }
}

#[cfg(feature = "parallel")]
fn parallel_try_map<T, R, E, F>(threads: usize, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    use rayon::prelude::*;
    match pool(threads) {
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        // Thread spawn failure: degrade to the calling thread.
        None => items.iter().map(f).collect(),
    }
}

/// One pool per thread count, built on first use and kept for the process.
#[cfg(feature = "parallel")]
fn pool(threads: usize) -> Option<std::sync::Arc<rayon::ThreadPool>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(p) = pools.get(&threads) {
        return Some(p.clone());
    }
    let p = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()?);
    pools.insert(threads, p.clone());
    Some(p)
}

#[cfg(not(feature = "parallel"))]
fn parallel_try_map<T, R, E, F>(_threads: usize, items: &[T], f: F) -> Result<Vec<R>, E>
where
    F: Fn(&T) -> Result<R, E>,
{
    items.iter().map(f).collect()
}
