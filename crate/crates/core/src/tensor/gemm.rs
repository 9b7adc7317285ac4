//! Row-major matrix products used by the conv and dense layers.
//!
//! Each output row depends only on the matching row of the left operand and
//! the loop order is fixed, so results are bit-identical no matter how rows
//! are batched or which thread computes them.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Real>(k: usize, m: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler vectorize without reassociating.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn all_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut nn = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut nn);
        let mut nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut nt);
        let mut tn = vec![0.0; m * n];
        gemm_tn(k, m, n, &transpose(m, k, &a), &b, &mut tn);

        for ((e, x), (y, z)) in expected.iter().zip(&nn).zip(nt.iter().zip(&tn)) {
            assert!((e - x).abs() < 1e-12);
            assert!((e - y).abs() < 1e-12);
            assert!((e - z).abs() < 1e-12);
        }
    }
}
