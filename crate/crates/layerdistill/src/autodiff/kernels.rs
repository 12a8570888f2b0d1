//! Inner loops shared by the forward and backward passes.
//!
//! All loops are sequential with a fixed iteration order, which makes every
//! result bitwise reproducible for identical inputs.

use super::tensor::Scalar;

/// c[n x m] += a[n x k] * b[k x m]
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(m)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ik * bv;
            }
        }
    }
}

/// c[n x k] += a[n x m] * b[k x m]^T  (rows of `a` dotted with rows of `b`)
pub(crate) fn matmul_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    n: usize,
    m: usize,
    k: usize,
) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * k);
    for (a_row, c_row) in a.chunks_exact(m).zip(c.chunks_exact_mut(k)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(m)) {
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// c[k x m] += a[n x k]^T * b[n x m]
pub(crate) fn matmul_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(c.len(), k * m);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(m)) {
        for (&a_iq, c_row) in a_row.iter().zip(c.chunks_exact_mut(m)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_iq * bv;
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically shifted softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// Numerically shifted log-softmax of one row, written into `out`.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for &v in row {
        denom += (v - max).exp();
    }
    let log_denom = denom.ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = [1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.0, 5.0]; // 2x3
        // nt: (2x3)*(2x3)^T = 2x2
        let mut c = [0.0; 4];
        matmul_nt_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.0, -0.5, 10.0, -4.0]);
        // tn: (2x3)^T*(2x3) = 3x3
        let mut d = [0.0; 9];
        matmul_tn_acc(&a, &b, &mut d, 2, 3, 3);
        assert_eq!(d[0], 1.0 * 2.0 + 3.0 * (-1.0));
        assert_eq!(d[8], 0.5 * 0.0 + (-1.0) * 5.0);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut out = [0.0f64; 2];
        softmax_row(&[0.0, 0.0], &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }
}
