//! Matrix-multiply kernels. Each output row is computed independently with a
//! fixed accumulation order, so results are bitwise identical whether rows run
//! sequentially or across the thread pool. `QUIETREAD_THREADS` caps intra-op
//! parallelism.

use std::sync::OnceLock;

use rayon::prelude::*;

use super::Scalar;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(v) = std::env::var("QUIETREAD_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    builder = builder.num_threads(n);
                }
            }
        }
        builder.build().expect("build thread pool")
    })
}

// Below this many multiply-adds the dispatch overhead outweighs the win.
const PAR_THRESHOLD: usize = 1 << 16;

fn run_rows<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if work < PAR_THRESHOLD {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    } else {
        pool().install(|| {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        });
    }
}

/// `a [m×k] @ b [k×n] -> [m×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    run_rows(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a [m×n] @ b^T where b is [k×n] -> [m×k]`; used for dA = dC·B^T.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * k];
    run_rows(&mut out, k, m * k * n, |i, row| {
        let a_row = &a[i * n..(i + 1) * n];
        for (t, o) in row.iter_mut().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// `a^T @ c where a is [m×k], c is [m×n] -> [k×n]`; used for dB = A^T·dC.
pub fn matmul_at<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    run_rows(&mut out, n, m * k * n, |t, row| {
        for i in 0..m {
            let av = a[i * k + t];
            let c_row = &c[i * n..(i + 1) * n];
            for (o, &cv) in row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    });
    out
}

/// Reference triple-loop multiply in the plainest index order. Deliberately
/// separate from [`matmul`] so tests can cross-check the optimized kernel.
pub fn matmul_naive<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Reference `a^T @ c` companion to [`matmul_naive`].
pub fn matmul_at_naive<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    for t in 0..k {
        for j in 0..n {
            let mut acc = T::ZERO;
            for i in 0..m {
                acc += a[i * k + t] * c[i * n + j];
            }
            out[t * n + j] = acc;
        }
    }
    out
}
