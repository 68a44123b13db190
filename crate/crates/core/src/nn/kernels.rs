//! Dense row-major matrix kernels. Large products are split by output row
//! across the rayon pool; every output element is accumulated in the same
//! order on both paths, so results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Products with at least this many multiply-adds go to the parallel path.
pub const PAR_THRESHOLD: usize = 1 << 15;

fn use_parallel(m: usize, k: usize, n: usize) -> bool {
    cfg!(feature = "parallel") && m > 1 && m * k * n >= PAR_THRESHOLD
}

fn row_times(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (p, &x) in a_row.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, y) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *o += x * y;
        }
    }
}

/// `a [m, k] · b [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if use_parallel(m, k, n) {
        matmul_par(a, b, m, k, n)
    } else {
        matmul_seq(a, b, m, k, n)
    }
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for (a_row, o) in a.chunks(k.max(1)).take(m).zip(out.chunks_mut(n)) {
        row_times(a_row, b, n, o);
    }
    out
}

/// Row-parallel product; the sequential kernel without the `parallel` feature.
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        let mut out = vec![0.0; m * n];
        if n == 0 {
            return out;
        }
        out.par_chunks_mut(n).zip(a.par_chunks(k.max(1))).for_each(|(o, a_row)| row_times(a_row, b, n, o));
        out
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(a, b, m, k, n)
    }
}

/// Gradients of `a · b` given the upstream gradient `g [m, n]`:
/// `(g · bᵀ, aᵀ · g)`.
pub fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let parallel = use_parallel(m, k, n);
    let da_row = |i: usize, out: &mut [f64]| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, d) in out.iter_mut().enumerate() {
            *d = grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    };
    let db_row = |p: usize, out: &mut [f64]| {
        for i in 0..m {
            let x = a[i * k + p];
            if x != 0.0 {
                for (d, gg) in out.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *d += x * gg;
                }
            }
        }
    };
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    if k == 0 || n == 0 {
        return (da, db);
    }
    #[cfg(feature = "parallel")]
    if parallel {
        da.par_chunks_mut(k).enumerate().for_each(|(i, o)| da_row(i, o));
        db.par_chunks_mut(n).enumerate().for_each(|(p, o)| db_row(p, o));
        return (da, db);
    }
    let _ = parallel;
    da.chunks_mut(k).enumerate().for_each(|(i, o)| da_row(i, o));
    db.chunks_mut(n).enumerate().for_each(|(p, o)| db_row(p, o));
    (da, db)
}
