//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run plain loops. Every helper hands each output chunk to
//! exactly one closure call and keeps inner summation order fixed, so results
//! are bitwise identical in both modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(i, chunk)` to consecutive `chunk_len` slices of `data`.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Collect `f(0..n)` into a `Vec`, preserving index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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
