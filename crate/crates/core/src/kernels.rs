//! Raw dense kernels shared by the tape ops.
//!
//! Multi-row matmuls parallelize across rows; single-row (incremental
//! decoding) stays serial since the rayon dispatch overhead would exceed the
//! work. This is what makes batched tree verification cheaper per token than
//! one-token-at-a-time forwards on the same machine.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold (multiply-accumulates) below which a matmul stays serial.
const PAR_MACS: usize = 150_000;

/// C (m,n) = A (m,k) @ B (k,n), row-major.
pub fn matmul<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    let row = |a_row: &[S], c_row: &mut [S]| {
        c_row.fill(S::zero());
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == S::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ik * bv;
            }
        }
    };

    if m >= 2 && m * k * n >= PAR_MACS {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(a_row, c_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(a_row, c_row);
        }
    }
}

/// C (m,n) = A (m,k) @ B^T where B is (n,k). Dot-product form.
pub fn matmul_nt<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);

    let row = |a_row: &[S], c_row: &mut [S]| {
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *c = acc;
        }
    };

    if m >= 2 && m * k * n >= PAR_MACS {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(a_row, c_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(a_row, c_row);
        }
    }
}

/// Out (k,n) = A^T @ C where A is (m,k) and C is (m,n).
pub fn matmul_tn<S: Scalar>(a: &[S], m: usize, k: usize, c: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);

    let row = |kk: usize, o_row: &mut [S]| {
        o_row.fill(S::zero());
        for i in 0..m {
            let a_ik = a[i * k + kk];
            if a_ik == S::zero() {
                continue;
            }
            let c_row = &c[i * n..(i + 1) * n];
            for (o, &cv) in o_row.iter_mut().zip(c_row) {
                *o += a_ik * cv;
            }
        }
    };

    if k >= 2 && m * k * n >= PAR_MACS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, o_row)| row(kk, o_row));
    } else {
        for (kk, o_row) in out.chunks_mut(n).enumerate() {
            row(kk, o_row);
        }
    }
}

/// Row-wise softmax over the last axis, numerically stabilized.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let os = &mut out[r * cols..(r + 1) * cols];
        let max = xs.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in os.iter_mut().zip(xs) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for o in os.iter_mut() {
            *o *= inv;
        }
    }
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let os = &mut out[r * cols..(r + 1) * cols];
        let max = xs.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in xs {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = v - lse;
        }
    }
}

/// Row-wise logsumexp over the last axis.
pub fn logsumexp_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let max = xs.iter().cloned().fold(S::neg_infinity(), S::max);
        if max == S::neg_infinity() {
            out[r] = S::neg_infinity();
            continue;
        }
        let mut sum = S::zero();
        for &v in xs {
            sum += (v - max).exp();
        }
        out[r] = max + sum.ln();
    }
}

/// Stable scalar log(exp(a) + exp(b)).
pub fn logaddexp<S: Scalar>(a: S, b: S) -> S {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == S::neg_infinity() {
        return hi;
    }
    hi + (S::one() + (lo - hi).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // [[1,2],[3,4]] @ I = [[1,2],[3,4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul(&a, 2, 2, &id, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // (2,3)
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // (3,4)
        let mut c = vec![0.0; 8];
        matmul(&a, 2, 3, &b, 4, &mut c);

        // B^T is (4,3); matmul_nt(a, bT) must equal matmul(a, b).
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_nt(&a, 2, 3, &bt, 4, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T @ C via matmul_tn must equal explicit transpose matmul.
        let mut atc = vec![0.0; 3 * 8 / 2];
        matmul_tn(&a, 2, 3, &c, 4, &mut atc);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut atc2 = vec![0.0; 12];
        matmul(&at, 3, 2, &c, 4, &mut atc2);
        for (x, y) in atc.iter().zip(&atc2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x = [0.0f64, 0.0, 0.0];
        let mut out = [0.0; 3];
        softmax_rows(&x, 1, 3, &mut out);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_of_probabilities_is_zero() {
        let x = [0.25f64.ln(), 0.75f64.ln()];
        let mut out = [0.0; 1];
        logsumexp_rows(&x, 1, 2, &mut out);
        assert!(out[0].abs() < 1e-12);
    }

    #[test]
    fn logaddexp_handles_neg_infinity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((logaddexp(f64::NEG_INFINITY, 0.5) - 0.5).abs() < 1e-12);
    }
}
