//! Row-sliced parallelism helpers.
//!
//! Every kernel partitions its output into disjoint row slices, and each
//! slice is filled with a fixed accumulation order, so the parallel and
//! sequential drivers produce bit-identical results. The `parallel` feature
//! swaps the driver, never the arithmetic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in multiply-adds) below which forking into the pool costs more
/// than it saves.
pub const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// Runs `f(row_index, row_slice)` over equally sized chunks of `data`,
/// sequentially. Always available; the benchmark suite uses it as the
/// baseline against the parallel driver.
pub fn for_rows_seq<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Parallel driver over disjoint rows. `work_hint` is the approximate total
/// multiply-add count; small problems stay on the calling thread.
#[cfg(feature = "parallel")]
pub fn for_rows<F>(data: &mut [f64], row_len: usize, work_hint: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if work_hint < PAR_WORK_THRESHOLD {
        for_rows_seq(data, row_len, f);
    } else {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_rows<F>(data: &mut [f64], row_len: usize, _work_hint: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for_rows_seq(data, row_len, f);
}

/// Maps `f` over indexed items, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
