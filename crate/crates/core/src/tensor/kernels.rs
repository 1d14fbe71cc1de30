//! Raw slice kernels shared by the tensor ops and the layer implementations.
//!
//! Every kernel computes each output element with a fixed sequential reduction
//! order, so results are bit-identical run to run; rayon only ever splits work
//! across disjoint output ranges.

use rayon::prelude::*;

use super::Element;

/// Work size above which matmul-style kernels parallelize.
const PAR_THRESHOLD: usize = 1 << 18;

/// C (m x n) = A (m x k) . B (k x n), all row-major.
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::ZERO; m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for l in 0..k {
            let coeff = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coeff * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C (m x n) = A (m x k) . B^T where B is (n x k) row-major.
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![E::ZERO; m * n];
    let row = |i: usize, out_row: &mut [E]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C (m x n) = A^T . B where A is (k x m) and B is (k x n), row-major.
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::ZERO; m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for l in 0..k {
            let coeff = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += coeff * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// Out (cols x rows) = transpose of `a` (rows x cols).
pub fn transpose2d<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // A: 2x3, B: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        let bt = transpose2d(&b, 3, 2);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);

        let at = transpose2d(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2), c);
    }

    #[test]
    fn parallel_path_matches_sequential() {
        // Force the parallel path with a shape above the threshold.
        let m = 64;
        let k = 32;
        let n = 160;
        let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 * 0.25 - 0.5).collect();
        let big = matmul_nn(&a, &b, m, k, n);
        // Sequential reference with identical inner loop order.
        let mut seq = vec![0.0f32; m * n];
        for i in 0..m {
            for l in 0..k {
                let coeff = a[i * k + l];
                for j in 0..n {
                    seq[i * n + j] += coeff * b[l * n + j];
                }
            }
        }
        assert_eq!(big, seq);
    }
}
