//! Dense linear algebra and the deterministic random source used throughout the crate.

mod eigen;
pub mod kernels;
mod matrix;
mod rng;

pub use eigen::{psd_eigvals, sym_eigvals, EIG_MAX_SWEEPS};
pub use matrix::Matrix;
pub use rng::{rng_normal, SeededRng};

use crate::error::{Result, TaqError};
use crate::scalar::Scalar;

/// Row Gram matrix `K = (1/r) Z Zᵀ` of an `r × d` matrix.
pub fn gram_matrix<T: Scalar>(z: &Matrix<T>) -> Result<Matrix<T>> {
    let (r, d) = z.shape();
    if r == 0 || d == 0 {
        return Err(TaqError::InvalidShape(format!("gram_matrix of {r}x{d}")));
    }
    let inv = T::one() / T::of(r as f64);
    let mut k = Matrix::zeros(r, r);
    for i in 0..r {
        let zi = z.row(i);
        for j in i..r {
            let v = kernels::dot(zi, z.row(j)) * inv;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Subtracts the column means, so every column of the result sums to zero.
pub fn center_rows<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    let (r, d) = x.shape();
    if r == 0 {
        return Err(TaqError::InvalidShape(
            "center_rows of a matrix with no rows".into(),
        ));
    }
    let mut mean = vec![T::zero(); d];
    for i in 0..r {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(r as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut out = x.clone();
    for i in 0..r {
        for (v, &m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(out)
}
