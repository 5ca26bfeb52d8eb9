use crate::error::{Result, TaqError};
use crate::scalar::Scalar;

use super::Matrix;

pub const EIG_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix, sorted descending, by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(K + Kᵀ)/2` first. Iteration stops once the off-diagonal
/// Frobenius norm falls below `1e-12 · ‖K‖_F`; after [`EIG_MAX_SWEEPS`] sweeps without
/// reaching that, a [`TaqError::ConvergenceError`] is returned.
pub fn sym_eigvals<T: Scalar>(k: &Matrix<T>) -> Result<Vec<T>> {
    let (n, m) = k.shape();
    if n != m {
        return Err(TaqError::InvalidShape(format!(
            "eigenvalues of non-square {n}x{m}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = T::of(0.5);
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (k[(i, j)] + k[(j, i)]) * half;
        }
    }
    let norm = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return Ok(vec![T::zero(); n]);
    }
    let rel = T::of(1e-12).max(T::epsilon() * T::of(10.0));
    let tol = rel * norm;

    let off_norm = |a: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off < tol {
            break;
        }
        if sweeps == EIG_MAX_SWEEPS {
            return Err(TaqError::ConvergenceError {
                off_norm: off.as_f64(),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = if theta.is_infinite() {
                    T::zero()
                } else {
                    let sign = if theta >= T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A ← Jᵀ A J, touching only rows/columns p and q.
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
            }
        }
    }

    let mut vals: Vec<T> = (0..n).map(|i| a[i * n + i]).collect();
    vals.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(vals)
}

/// Eigenvalues of a positive semi-definite matrix. Negative values are numerical noise
/// and are clamped to zero.
pub fn psd_eigvals<T: Scalar>(k: &Matrix<T>) -> Result<Vec<T>> {
    Ok(sym_eigvals(k)?
        .into_iter()
        .map(|v| v.max(T::zero()))
        .collect())
}
