//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) work is fanned out over the
//! rayon pool; without it, or when [`Execution::Sequential`] is requested
//! explicitly, the same closures run in a plain loop. Every helper hands out
//! disjoint output slices and collects results in index order, so the two
//! modes produce bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Execution {
    /// `Parallel` when compiled with the `parallel` feature, else `Sequential`.
    pub const fn preferred() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Default for Execution {
    fn default() -> Self {
        Self::preferred()
    }
}

/// Calls `f(first_row, chunk)` over consecutive chunks of `rows_per_chunk`
/// rows of `out`, where each row is `row_len` values long.
pub fn for_each_row_chunk<F>(
    exec: Execution,
    out: &mut [f64],
    row_len: usize,
    rows_per_chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if out.is_empty() || row_len == 0 {
        return;
    }
    let rows_per_chunk = rows_per_chunk.max(1);
    let chunk_len = row_len * rows_per_chunk;
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => out
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * rows_per_chunk, chunk)),
        _ => out
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * rows_per_chunk, chunk)),
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Rows per chunk so that each chunk carries roughly `target_work` units
/// when a single row costs `work_per_row`.
pub(crate) fn rows_for_work(work_per_row: usize, target_work: usize) -> usize {
    (target_work / work_per_row.max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a = vec![0.0; 37 * 5];
        let mut b = a.clone();
        let fill = |first: usize, chunk: &mut [f64]| {
            for (i, row) in chunk.chunks_mut(5).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = ((first + i) * 10 + j) as f64;
                }
            }
        };
        for_each_row_chunk(Execution::Sequential, &mut a, 5, 4, fill);
        for_each_row_chunk(Execution::Parallel, &mut b, 5, 3, fill);
        assert_eq!(a, b);
        let s = map_indexed(Execution::Sequential, 20, |i| i * i);
        let p = map_indexed(Execution::Parallel, 20, |i| i * i);
        assert_eq!(s, p);
    }
}
