use crate::error::{Result, TaqError};
use crate::scalar::Scalar;

use super::{check_bits, max_code};

/// Lower bound on the scale; keeps constant groups well defined.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Weight units per code step.
    pub scale: f64,
    /// Weight value of code 0.
    pub zero_point: f64,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite() && zero_point.is_finite()) {
            return Err(TaqError::InvalidInput(format!(
                "quantizer params scale={scale} zero_point={zero_point}"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
        })
    }

    #[inline]
    pub fn code_of(&self, x: f64) -> u16 {
        let q = ((x - self.zero_point) / self.scale).round();
        q.clamp(0.0, max_code(self.bits) as f64) as u16
    }

    #[inline]
    pub fn value_of(&self, code: u16) -> f64 {
        code as f64 * self.scale + self.zero_point
    }
}

fn range<T: Scalar>(group: &[T]) -> Result<(f64, f64)> {
    if group.is_empty() {
        return Err(TaqError::InvalidInput(
            "cannot fit quantizer to an empty group".into(),
        ));
    }
    let (lo, hi) = group
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
    Ok((lo, hi))
}

/// Min-max fit: `s = max((max − min)/(2^bits − 1), 1e-12)`, `z = min`.
pub fn fit_minmax<T: Scalar>(group: &[T], bits: u8) -> Result<QuantParams> {
    fit_scaled(group, bits, 1.0)
}

/// Min-max fit with the scale multiplied by `multiplier`; the zero-point stays at the group
/// minimum so the smallest value remains exactly representable.
pub fn fit_scaled<T: Scalar>(group: &[T], bits: u8, multiplier: f64) -> Result<QuantParams> {
    check_bits(bits)?;
    let (lo, hi) = range(group)?;
    let scale = ((hi - lo) / max_code(bits) as f64 * multiplier).max(SCALE_FLOOR);
    QuantParams::new(scale, lo, bits)
}

pub fn quantize_group<T: Scalar>(group: &[T], p: &QuantParams) -> Vec<u16> {
    group.iter().map(|&x| p.code_of(x.as_f64())).collect()
}

pub fn dequantize_group<T: Scalar>(codes: &[u16], p: &QuantParams) -> Result<Vec<T>> {
    let top = max_code(p.bits);
    codes
        .iter()
        .map(|&c| {
            if c as u32 > top {
                Err(TaqError::CorruptCodes(format!(
                    "code {c} exceeds {top} at {} bits",
                    p.bits
                )))
            } else {
                Ok(T::of(p.value_of(c)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rng_normal, SeededRng};
    use proptest::prelude::*;

    #[test]
    fn exact_range_fit() {
        let p = fit_minmax(&[0.0f64, 255.0], 8).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0.0));
    }

    #[test]
    fn constant_group() {
        let g = [2.5f64; 3];
        let p = fit_minmax(&g, 4).unwrap();
        assert_eq!((p.scale, p.zero_point), (SCALE_FLOOR, 2.5));
        let deq: Vec<f64> = dequantize_group(&quantize_group(&g, &p), &p).unwrap();
        assert_eq!(deq, vec![2.5; 3]);
    }

    #[test]
    fn empty_and_bad_bits() {
        assert!(matches!(
            fit_minmax::<f64>(&[], 8),
            Err(TaqError::InvalidInput(_))
        ));
        assert!(fit_minmax(&[1.0f64], 3).is_err());
    }

    #[test]
    fn per_element_round_trip_4bit() {
        let g = rng_normal(&mut SeededRng::new(4), 128);
        let p = fit_minmax(&g, 4).unwrap();
        let deq: Vec<f64> = dequantize_group(&quantize_group(&g, &p), &p).unwrap();
        for (x, y) in g.iter().zip(&deq) {
            assert!((x - y).abs() <= p.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn lattice_and_saturation() {
        let p = QuantParams::new(0.25, -1.0, 8).unwrap();
        assert_eq!(p.code_of(-1.0), 0);
        for k in [0u16, 1, 7, 100, 255] {
            let x = -1.0 + 0.25 * k as f64;
            assert_eq!(p.code_of(x), k);
            assert_eq!(p.value_of(k), x);
        }
        assert_eq!(p.code_of(1e9), 255);
        assert_eq!(p.code_of(-1e9), 0);
    }

    #[test]
    fn round_half_away_from_zero() {
        let p = QuantParams::new(1.0, 0.0, 4).unwrap();
        assert_eq!(p.code_of(2.5), 3);
        assert_eq!(p.code_of(0.5), 1);
    }

    #[test]
    fn corrupt_codes_detected() {
        let p = QuantParams::new(1.0, 0.0, 4).unwrap();
        assert!(matches!(
            dequantize_group::<f64>(&[3, 16], &p),
            Err(TaqError::CorruptCodes(_))
        ));
        assert_eq!(dequantize_group::<f64>(&[0], &p).unwrap(), vec![0.0]);
    }

    proptest! {
        #[test]
        fn round_trip_bound(seed in any::<u64>(), bits in prop::sample::select(vec![4u8, 8, 16]), n in 1usize..200) {
            let mut rng = SeededRng::new(seed);
            let scale = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
            let g: Vec<f64> = rng_normal(&mut rng, n).into_iter().map(|x| x * scale).collect();
            let p = fit_minmax(&g, bits).unwrap();
            let deq: Vec<f64> = dequantize_group(&quantize_group(&g, &p), &p).unwrap();
            for (x, y) in g.iter().zip(&deq) {
                prop_assert!((x - y).abs() <= p.scale / 2.0 + 1e-12);
            }
        }
    }
}
