//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures sequentially. Every helper partitions work into
//! disjoint outputs, so results are bit-identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of output rows before a kernel splits work across threads.
#[cfg(feature = "parallel")]
pub const PAR_MIN_ROWS: usize = 32;

/// Runs `f(row_index, row)` over consecutive `row_len` chunks of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() / row_len >= PAR_MIN_ROWS {
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n` and collects results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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

/// True when the crate was built with the rayon backend.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
