//! Dense matrix kernels shared by the autodiff graph.
//!
//! Output rows are independent and each row is accumulated in a fixed order,
//! so the parallel and sequential kernels agree bit for bit.

use crate::par;

/// Below this many multiply-adds the parallel kernel runs sequentially.
pub const PAR_THRESHOLD: usize = 1 << 16;

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `[m, k] x [k, n]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    par::fill_chunks_seq(&mut out, n, |i, row| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// `[m, k] x [k, n]`, row-parallel when the work is large enough.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if m * k * n < PAR_THRESHOLD || !par::enabled() || n == 0 {
        return matmul_seq(a, b, m, k, n);
    }
    let mut out = vec![0.0; m * n];
    par::fill_chunks(&mut out, n, |i, row| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Transpose of a `[rows, cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `[m, k] x [n, k]^T`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `[k, m]^T x [k, n]`.
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}
