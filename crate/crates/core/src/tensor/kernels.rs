//! Dense row-major matrix kernels.
//!
//! Each output row is accumulated in a fixed order that does not depend on
//! how rows are split into chunks, so sequential and parallel execution give
//! identical bits.

use crate::parallel::{for_each_row_chunk, rows_for_work, Execution};

const CHUNK_WORK: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_nn(exec: Execution, a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let rows = rows_for_work(k * n, CHUNK_WORK);
    for_each_row_chunk(exec, c, n, rows, |first, chunk| {
        for (r, c_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = &a[(first + r) * k..(first + r + 1) * k];
            c_row.fill(0.0);
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    });
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(exec: Execution, a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let rows = rows_for_work(k * n, CHUNK_WORK);
    for_each_row_chunk(exec, c, n, rows, |first, chunk| {
        for (r, c_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = &a[(first + r) * k..(first + r + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    });
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(exec: Execution, a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let rows = rows_for_work(k * n, CHUNK_WORK);
    for_each_row_chunk(exec, c, n, rows, |first, chunk| {
        chunk.fill(0.0);
        let n_rows = chunk.len() / n;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let a_row = &a[p * m..(p + 1) * m];
            for r in 0..n_rows {
                let a_pi = a_row[first + r];
                if a_pi == 0.0 {
                    continue;
                }
                let c_row = &mut chunk[r * n..(r + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_pi * bv;
                }
            }
        }
    });
}

/// Dot product with four independent accumulators, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        let (m, k, n) = (7, 5, 6);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut c = vec![0.0; m * n];
            matmul_nn(exec, &a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let bt = transpose(&b, k, n);
            matmul_nt(exec, &a, &bt, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let at = transpose(&a, m, k);
            matmul_tn(exec, &at, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(dot(&a, &a), 140.0);
        assert_eq!(dot(&[], &[]), 0.0);
    }
}
