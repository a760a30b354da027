//! Data-parallel execution helpers.
//!
//! Every kernel partitions its output buffer into disjoint pieces and each
//! element is produced by exactly one closure call with a fixed inner
//! summation order, so results are bit-identical whether the `parallel`
//! feature is on or off and regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the thread-pool overhead is not worth it.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 16 * 1024;

/// Fill `out[i] = f(i)` for every index.
pub fn fill_with<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_THRESHOLD {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, o)| *o = f(i));
        return;
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = f(i);
    }
}

/// Split `out` into consecutive rows of `row_len` and run `f(row_index, row)`
/// on each. Rows are disjoint, so this parallelizes without changing results.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Run `f(i)` for `i in 0..n`, producing independent per-index buffers that
/// the caller combines in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        return (0..n).into_par_iter().map(|i| f(i)).collect();
    }
    #[cfg(not(feature = "parallel"))]
    (0..n).map(f).collect()
}
