use crate::error::Result;
use crate::linalg::{center_rows, gram_matrix, psd_eigvals, Matrix};
use crate::scalar::Scalar;

use super::Reservoir;

/// Eigenvalues below `EIGEN_FLOOR · λ_max` are dropped before normalization.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub nats: f64,
    /// Eigenvalues kept after flooring.
    pub kept: usize,
    /// No eigenvalue survived (all rows identical); `nats` is 0 by convention.
    pub degenerate: bool,
}

pub fn spectral_entropy<T: Scalar>(reservoir: &Reservoir<T>) -> Result<Entropy> {
    spectral_entropy_of(&reservoir.to_matrix())
}

/// Shannon entropy of the normalized spectrum of `K = (1/r) Z Zᵀ`, `Z` the centered rows.
///
/// When the rows outnumber the columns the `d × d` matrix `(1/r) Zᵀ Z` is decomposed
/// instead; it has the same non-zero eigenvalues.
pub fn spectral_entropy_of<T: Scalar>(rows: &Matrix<T>) -> Result<Entropy> {
    let x: Matrix<f64> = rows.cast();
    let z = center_rows(&x)?;
    let (r, d) = z.shape();
    let k = if r > d {
        let mut c = gram_matrix(&z.transpose())?;
        // gram_matrix scaled by 1/d; rescale to 1/r
        let f = d as f64 / r as f64;
        c.as_mut_slice().iter_mut().for_each(|v| *v *= f);
        c
    } else {
        gram_matrix(&z)?
    };
    Ok(entropy_of_spectrum(&psd_eigvals(&k)?))
}

pub(crate) fn entropy_of_spectrum(eigs: &[f64]) -> Entropy {
    let lmax = eigs.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return Entropy {
            nats: 0.0,
            kept: 0,
            degenerate: true,
        };
    }
    let kept: Vec<f64> = eigs
        .iter()
        .copied()
        .filter(|&l| l >= EIGEN_FLOOR * lmax)
        .collect();
    let total: f64 = kept.iter().sum();
    let nats = -kept
        .iter()
        .map(|&l| {
            let p = l / total;
            p * p.ln()
        })
        .sum::<f64>();
    Entropy {
        nats: nats.max(0.0),
        kept: kept.len(),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rng_normal, sym_eigvals, SeededRng};
    use proptest::prelude::*;

    fn random(r: usize, d: usize, seed: u64) -> Matrix<f64> {
        Matrix::from_vec(r, d, rng_normal(&mut SeededRng::new(seed), r * d)).unwrap()
    }

    #[test]
    fn identical_rows() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let e = spectral_entropy_of(&m).unwrap();
        assert_eq!(e.nats, 0.0);
        assert!(e.degenerate);
    }

    #[test]
    fn two_point_uniform() {
        let e = entropy_of_spectrum(&[0.5, 0.5]);
        assert!((e.nats - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_reach_log_rank() {
        // r scaled basis vectors: after centering the Gram has r−1 equal non-zero eigenvalues.
        for r in 2..8 {
            let mut m = Matrix::zeros(r, r + 2);
            for i in 0..r {
                m[(i, i)] = 3.0;
            }
            let e = spectral_entropy_of(&m).unwrap();
            assert_eq!(e.kept, r - 1);
            assert!((e.nats - ((r - 1) as f64).ln()).abs() < 1e-10, "r={r}");
        }
    }

    #[test]
    fn dual_route_matches_token_gram() {
        // rows > cols takes the covariance route; compare against the r×r Gram directly.
        let x = random(40, 6, 8);
        let z = center_rows(&x).unwrap();
        let direct = entropy_of_spectrum(&psd_eigvals(&gram_matrix(&z).unwrap()).unwrap());
        let via = spectral_entropy_of(&x).unwrap();
        assert!((direct.nats - via.nats).abs() < 1e-10);
        let top_direct = sym_eigvals(&gram_matrix(&z).unwrap()).unwrap();
        assert!(top_direct[6..].iter().all(|v| v.abs() < 1e-10));
    }

    proptest! {
        #[test]
        fn bounded_by_log_rows(seed in any::<u64>(), r in 1usize..30, d in 1usize..12) {
            let e = spectral_entropy_of(&random(r, d, seed)).unwrap();
            prop_assert!(e.nats >= 0.0 && e.nats <= (r as f64).ln() + 1e-12);
            if e.kept > 0 {
                prop_assert!(e.nats <= (e.kept as f64).ln() + 1e-12);
            }
        }

        #[test]
        fn scale_invariant(seed in any::<u64>(), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let x = random(12, 5, seed);
            let a = spectral_entropy_of(&x).unwrap().nats;
            let b = spectral_entropy_of(&x.map(|v| v * c)).unwrap().nats;
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
