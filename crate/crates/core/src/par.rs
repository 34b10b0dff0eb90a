//! Thin switch between rayon and plain iteration. Everything routed through
//! here must be order-preserving and free of cross-item state so that results
//! are identical whichever path runs (and for the parallel path, identical at
//! any thread count).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Cap the global worker pool. A no-op without the `parallel` feature or if a
/// pool already exists (rayon only allows one global initialization).
pub fn limit_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
