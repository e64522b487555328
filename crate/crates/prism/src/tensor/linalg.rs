//! Dense row-major matrix kernels.
//!
//! Every output element accumulates over its contraction index in a fixed
//! left-to-right order, so results are bitwise reproducible. The loop nests
//! are arranged so the innermost loop runs over contiguous memory in both
//! the output and one operand, which lets the compiler vectorize them.

use super::Scalar;

/// `out[m,n] = a[m,k] * b[k,n]`. Overwrites `out`.
pub fn mm_nn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in out.iter_mut() {
        *row = E::zero();
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &apk) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + apk * bv;
            }
        }
    }
}

/// `out[m,n] = a[m,k] * b[n,k]^T` (`b` stored row-major as `[n,k]`).
pub fn mm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m,n] = a[k,m]^T * b[k,n]` (`a` stored row-major as `[k,m]`).
pub fn mm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in out.iter_mut() {
        *row = E::zero();
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &apm) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + apm * bv;
            }
        }
    }
}

/// Transpose `[r,c] -> [c,r]`.
pub fn transpose<E: Scalar>(a: &[E], out: &mut [E], r: usize, c: usize) {
    debug_assert_eq!(a.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_hand_case() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut out = [0.0f64; 2];
        mm_nn(&a, &b, &mut out, 2, 2, 1);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();

        let mut c_ref = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c_ref, m, k, n);

        // mm_nt with b pre-transposed to [n,k]
        let mut bt = vec![0.0; k * n];
        transpose(&b, &mut bt, k, n);
        let mut c_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c_nt, m, k, n);
        assert_eq!(c_ref, c_nt);

        // mm_tn with a pre-transposed to [k,m]
        let mut at = vec![0.0; m * k];
        transpose(&a, &mut at, m, k);
        let mut c_tn = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c_tn, m, k, n);
        assert_eq!(c_ref, c_tn);
    }
}
