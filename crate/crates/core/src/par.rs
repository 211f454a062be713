//! Row-parallel evaluation with a fixed reduction order.
//!
//! Work is cut into chunks whose boundaries depend only on the problem size,
//! each chunk is folded sequentially, and chunk results are combined left to
//! right. The result is therefore bit-identical whether the chunks run on a
//! rayon pool of any size or, without the `parallel` feature, in a plain loop.

use std::ops::Range;

/// Rows per chunk. Fixed so that results never depend on the thread count.
pub const CHUNK: usize = 64;

fn chunks(n: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Maps every chunk of `0..n` through `f` and returns the results in chunk
/// order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunks(n, chunk.max(1));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Maps chunks of `0..n` and folds the chunk results in order with `merge`.
pub fn map_reduce<T, F, M>(n: usize, chunk: usize, init: T, f: F, mut merge: M) -> T
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    M: FnMut(T, T) -> T,
{
    map_chunks(n, chunk, f).into_iter().fold(init, &mut merge)
}

/// Maps each index independently, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Element-wise `acc += other`.
pub fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
