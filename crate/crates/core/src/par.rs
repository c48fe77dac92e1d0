//! Chunked loops that run on rayon when the `parallel` feature is on.
//!
//! Each chunk is written by exactly one task, so outputs are identical for
//! any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}
