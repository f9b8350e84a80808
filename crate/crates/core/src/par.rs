//! Data parallelism over disjoint output chunks.
//!
//! Work is only ever split across independent output elements, so results
//! are bitwise identical for any worker count.

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    if chunk == 0 {
        return;
    }
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    if chunk == 0 {
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Caps the worker pool used by data-parallel kernels. Call before the first
/// parallel operation; without the `parallel` feature this does nothing.
#[cfg(feature = "parallel")]
pub fn set_worker_threads(n: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::State(format!("worker pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn set_worker_threads(_n: usize) -> crate::Result<()> {
    Ok(())
}
