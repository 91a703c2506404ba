//! Execution policy: data-parallel loops with a sequential fallback.
//!
//! Every batch loop in the crate (reranking candidates, retrieving queries,
//! forward/backward over a training batch, per-query evaluation) goes
//! through [`map_indexed`]. Under the `parallel` feature the parallel
//! policy fans work out with rayon; results are collected back in input
//! order, so any reduction the caller performs afterwards runs in a fixed
//! order and the output is byte-identical to the sequential policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How batch loops execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPolicy {
    /// Plain iterator loop on the calling thread.
    Sequential,
    /// Rayon work-stealing over the current thread pool.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecPolicy {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecPolicy::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecPolicy::Sequential
    }
}

impl ExecPolicy {
    /// Policy for a requested worker count: one thread means sequential.
    pub fn for_threads(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if threads == 1 {
                ExecPolicy::Sequential
            } else {
                ExecPolicy::Parallel
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            ExecPolicy::Sequential
        }
    }
}

/// Map `f` over `items`, returning results in input order.
pub fn map_indexed<T, U, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    match policy {
        ExecPolicy::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect(),
    }
}

/// Fallible variant of [`map_indexed`]; the first error (by input order
/// under the sequential policy, by rayon's find semantics otherwise) is
/// returned.
pub fn try_map_indexed<T, U, E, F>(
    policy: ExecPolicy,
    items: &[T],
    f: F,
) -> std::result::Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(usize, &T) -> std::result::Result<U, E> + Sync,
{
    match policy {
        ExecPolicy::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        #[cfg(feature = "parallel")]
        ExecPolicy::Parallel => items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect(),
    }
}

/// Run `f` inside a rayon pool of `threads` workers (parallel feature only;
/// otherwise just calls `f`). `threads == 0` keeps the default pool size.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            f()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("rayon pool")
                .install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
