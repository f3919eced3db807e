//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the `Parallel` and `Auto` strategies fan out
//! over rayon's pool; without it every strategy runs on the calling thread.
//! Results are always returned in index order, so output never depends on
//! scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    /// Parallel when the feature is enabled and the batch is large enough.
    #[default]
    Auto,
    Parallel,
    Sequential,
}

impl Execution {
    fn fans_out(self, len: usize, min_len: usize) -> bool {
        if !cfg!(feature = "parallel") {
            return false;
        }
        match self {
            Execution::Sequential => false,
            Execution::Parallel => true,
            Execution::Auto => len >= min_len && worker_count() > 1,
        }
    }
}

/// Number of workers available to parallel batches.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..len).map(f)` collected in order. `min_len` is the smallest batch
/// `Auto` will parallelise.
pub fn map_indexed<T, F>(exec: Execution, len: usize, min_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if exec.fans_out(len, min_len) {
        #[cfg(feature = "parallel")]
        {
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(exec: Execution, len: usize, min_len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, len, min_len, f).into_iter().collect()
}
