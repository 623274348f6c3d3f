//! Row-major matrix kernels.
//!
//! Every kernel accumulates each output row in a fixed order that depends only
//! on the matching input row, so row `i` of a product is bit-identical no
//! matter how many other rows are present. Causal-prefix checks and the
//! image-blocked contrast forward rely on that.

use crate::scalar::Real;

/// `c (n×m) = a (n×k) · b (k×m)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `c (n×m) = a (n×k) · bᵀ` where `b` is `m×k`.
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let bt = transpose(b, m, k);
    matmul(a, &bt, n, k, m)
}

/// `c (k×m) += aᵀ · d` where `a` is `n×k` and `d` is `n×m`.
pub fn matmul_at_acc<T: Real>(c: &mut [T], a: &[T], d: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * m..(p + 1) * m];
            for (c_pj, &d_ij) in c_row.iter_mut().zip(d_row) {
                *c_pj += a_ip * d_ij;
            }
        }
    }
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
