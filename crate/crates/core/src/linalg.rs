//! Flat row-major matrix kernels used by the conv/linear layers.
//!
//! Accumulation order over the inner dimension is fixed (ascending k), so
//! results are deterministic for a given input regardless of threading at
//! higher levels.

use crate::Elem;

/// c += a (m x k) * b (k x n)
pub fn matmul_acc(c: &mut [Elem], a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_el, &b_el) in c_row.iter_mut().zip(b_row) {
                *c_el += a_ip * b_el;
            }
        }
    }
}

/// c += a (m x k) * b^T where b is (n x k)
pub fn matmul_abt_acc(c: &mut [Elem], a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c += a^T * b where a is (k x m), b is (k x n)
pub fn matmul_atb_acc(c: &mut [Elem], a: &[Elem], b: &[Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_el, &b_el) in c_row.iter_mut().zip(b_row) {
                *c_el += a_pi * b_el;
            }
        }
    }
}
