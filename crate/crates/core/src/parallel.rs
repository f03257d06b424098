//! Order-preserving map over independent items, run on the rayon pool when
//! the `parallel` feature is enabled and sequentially otherwise.
//!
//! Results always come back in input order, and callers reduce them in that
//! order, so output does not depend on the thread count.

/// Which execution path [`map_ordered`] takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Auto,
    Sequential,
}

impl Execution {
    /// `jobs == 1` forces the sequential path.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            Execution::Sequential
        } else {
            Execution::Auto
        }
    }
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Auto && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(&f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Installs a global rayon pool of `jobs` threads. Only the first call wins;
/// `jobs == 0` keeps rayon's default.
pub fn configure_threads(jobs: usize) {
    #[cfg(feature = "parallel")]
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let _ = jobs;
}
