//! Thin switch between rayon and sequential iteration.
//!
//! Callers always pass an explicit `parallel` flag; when the crate is built
//! without the `parallel` feature the flag is ignored.

/// True when the crate was built with the `parallel` feature.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Runs `f(chunk_index, chunk)` over consecutive `size`-element chunks of `out`.
pub(crate) fn for_each_chunk_mut<T, F>(out: &mut [T], size: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    out.chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over `0..n`.
pub(crate) fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
