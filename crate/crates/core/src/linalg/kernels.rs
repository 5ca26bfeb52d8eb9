//! Slice-level matrix kernels. All matrices are row-major.

use crate::scalar::Scalar;

/// Dot product over eight interleaved partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

const MR: usize = 4;
const NR: usize = 16;

/// `out (m×n) += a (m×k) · b (k×n)`
///
/// Each output element is accumulated in `p` order starting from its existing value, so the
/// blocked and unblocked paths round identically.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(
        a.len() == m * k && b.len() == k * n && out.len() == m * n,
        "matmul_acc: shape mismatch"
    );
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { matmul_acc_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    matmul_acc_blocked(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    matmul_acc_blocked(a, b, out, m, k, n);
}

#[inline(always)]
fn matmul_acc_blocked<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mb = m / MR * MR;
    let nb = n / NR * NR;
    for i0 in (0..mb).step_by(MR) {
        for j0 in (0..nb).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("block");
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = a[(i0 + r) * k + p];
                    for j in 0..NR {
                        row[j] += x * brow[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if nb < n {
            matmul_acc_simple(a, b, out, i0..i0 + MR, nb..n, k, n);
        }
    }
    if mb < m {
        matmul_acc_simple(a, b, out, mb..m, 0..n, k, n);
    }
}

#[inline(always)]
fn matmul_acc_simple<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let orow = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in orow
                .iter_mut()
                .zip(&b[p * n + cols.start..p * n + cols.end])
            {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &ari) in arow.iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ari * bv;
            }
        }
    }
}

/// `out (m×k) += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    if m < 4 {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for j in 0..k {
                out[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
            }
        }
        return;
    }
    let mut bt = vec![T::zero(); n * k];
    for j in 0..k {
        for (p, &v) in b[j * n..(j + 1) * n].iter().enumerate() {
            bt[p * k + j] = v;
        }
    }
    matmul_acc(a, &bt, out, m, n, k);
}
