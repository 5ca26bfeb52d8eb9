use crate::error::{Result, TaqError};
use crate::scalar::Scalar;

/// Running sums over every activation element of one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingMoments {
    pub s1: f64,
    pub s2: f64,
    pub n: u64,
}

impl StreamingMoments {
    pub fn update<T: Scalar>(&mut self, xs: &[T]) {
        for &x in xs {
            let x = x.as_f64();
            self.s1 += x;
            self.s2 += x * x;
        }
        self.n += xs.len() as u64;
    }

    pub fn merge(&mut self, other: &Self) {
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.n += other.n;
    }
}

/// `Var = s2/n − (s1/n)²` clamped at zero, and stability `S = −Var`.
pub fn variance_and_stability(m: &StreamingMoments) -> Result<(f64, f64)> {
    if m.n == 0 {
        return Err(TaqError::InsufficientData("no activations observed".into()));
    }
    let n = m.n as f64;
    let mean = m.s1 / n;
    let var = (m.s2 / n - mean * mean).max(0.0);
    Ok((var, -var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rng_normal, SeededRng};
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }

    #[test]
    fn symmetric_pair() {
        let mut m = StreamingMoments::default();
        m.update(&[1.0f64, -1.0]);
        assert_eq!(
            m,
            StreamingMoments {
                s1: 0.0,
                s2: 2.0,
                n: 2
            }
        );
        assert_eq!(variance_and_stability(&m).unwrap(), (1.0, -1.0));
    }

    #[test]
    fn constant_stream() {
        let mut m = StreamingMoments::default();
        m.update(&[0.3f64, 0.3]);
        let (v, s) = variance_and_stability(&m).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(s, -v);
    }

    #[test]
    fn empty_is_insufficient() {
        assert!(matches!(
            variance_and_stability(&StreamingMoments::default()),
            Err(TaqError::InsufficientData(_))
        ));
    }

    #[test]
    fn additive_updates() {
        let xs = rng_normal(&mut SeededRng::new(3), 50);
        let mut a = StreamingMoments::default();
        a.update(&xs[..20]);
        a.update(&xs[20..]);
        let mut b = StreamingMoments::default();
        b.update(&xs);
        assert!((a.s1 - b.s1).abs() < 1e-12 && (a.s2 - b.s2).abs() < 1e-12 && a.n == b.n);
    }

    proptest! {
        #[test]
        fn matches_two_pass(seed in any::<u64>(), n in 2usize..5000, shift in -2.0f64..2.0) {
            let xs: Vec<f64> = rng_normal(&mut SeededRng::new(seed), n).into_iter().map(|x| x + shift).collect();
            let mut m = StreamingMoments::default();
            for chunk in xs.chunks(7) {
                m.update(chunk);
            }
            let (v, s) = variance_and_stability(&m).unwrap();
            let want = two_pass(&xs);
            prop_assert!((v - want).abs() <= 1e-9 * want, "{} vs {}", v, want);
            prop_assert_eq!(s, -v);
            prop_assert!(m.s2 * m.n as f64 >= m.s1 * m.s1 - 1e-6 * (m.s2 * m.n as f64).max(1.0));
        }
    }
}
