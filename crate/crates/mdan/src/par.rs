//! Data-parallel helpers with a sequential fallback.
//!
//! All parallel loops in the crate go through [`map_indexed`], which maps a
//! function over an index range and collects results **in index order**, so
//! the output (and any reduction over it) is bitwise identical whether the
//! `parallel` feature is enabled or not. Benches compare the two paths via
//! [`Parallelism`].

/// Execution mode for data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon work-stealing; only available with the `parallel` feature.
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
