use crate::error::{Result, TaqError};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{check_bits, fit_minmax, max_code, QuantParams};

/// Group-wise quantized weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<T = f64> {
    rows: usize,
    cols: usize,
    group_size: usize,
    bits: u8,
    codes: Vec<u16>,
    params: Vec<QuantParams>,
    cache: Option<Matrix<T>>,
}

impl<T: Scalar> QTensor<T> {
    /// Assembles a tensor from stored parts, validating every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        codes: Vec<u16>,
        params: Vec<QuantParams>,
        cache: bool,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(TaqError::InvalidInput("group_size must be positive".into()));
        }
        let n = rows * cols;
        if codes.len() != n {
            return Err(TaqError::InvalidShape(format!(
                "{} codes for {rows}x{cols}",
                codes.len()
            )));
        }
        if params.len() != n.div_ceil(group_size) {
            return Err(TaqError::InvalidShape(format!(
                "{} groups, expected {}",
                params.len(),
                n.div_ceil(group_size)
            )));
        }
        let bits = params.first().map_or(Ok(16), |p| check_bits(p.bits))?;
        for (g, p) in params.iter().enumerate() {
            QuantParams::new(p.scale, p.zero_point, p.bits)?;
            let top = max_code(p.bits);
            let lo = g * group_size;
            let hi = (lo + group_size).min(n);
            if let Some(&c) = codes[lo..hi].iter().find(|&&c| c as u32 > top) {
                return Err(TaqError::CorruptCodes(format!(
                    "group {g}: code {c} above {top}"
                )));
            }
        }
        let mut t = Self {
            rows,
            cols,
            group_size,
            bits,
            codes,
            params,
            cache: None,
        };
        if cache {
            t.cache = Some(t.dequantize());
        }
        Ok(t)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn n_groups(&self) -> usize {
        self.params.len()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    /// Flat index range covered by group `g`.
    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let lo = g * self.group_size;
        lo..(lo + self.group_size).min(self.codes.len())
    }

    pub fn group_codes(&self, g: usize) -> &[u16] {
        &self.codes[self.group_range(g)]
    }

    /// Fresh dequantization of every group.
    pub fn dequantize(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.codes.len());
        for (g, p) in self.params.iter().enumerate() {
            data.extend(
                self.codes[self.group_range(g)]
                    .iter()
                    .map(|&c| T::of(p.value_of(c))),
            );
        }
        Matrix::from_vec(self.rows, self.cols, data).expect("shape checked at construction")
    }

    pub fn cached(&self) -> Option<&Matrix<T>> {
        self.cache.as_ref()
    }

    pub fn enable_cache(&mut self) {
        if self.cache.is_none() {
            self.cache = Some(self.dequantize());
        }
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }

    /// Re-quantizes group `g` of `original` with new parameters, keeping the cache coherent.
    pub fn refit_group(&mut self, g: usize, original: &[T], p: QuantParams) -> Result<()> {
        if original.len() != self.codes.len() {
            return Err(TaqError::InvalidShape(
                "refit_group: original weight size mismatch".into(),
            ));
        }
        if p.bits != self.bits {
            return Err(TaqError::InvalidInput(format!(
                "group bits {} differ from tensor bits {}",
                p.bits, self.bits
            )));
        }
        let range = self.group_range(g);
        for i in range.clone() {
            self.codes[i] = p.code_of(original[i].as_f64());
        }
        if let Some(cache) = self.cache.as_mut() {
            let dst = cache.as_mut_slice();
            for i in range {
                dst[i] = T::of(p.value_of(self.codes[i]));
            }
        }
        self.params[g] = p;
        Ok(())
    }
}

/// Quantizes `w` with min-max groups, caching the dequantized matrix.
pub fn quantize_tensor<T: Scalar>(
    w: &Matrix<T>,
    bits: u8,
    group_size: usize,
) -> Result<QTensor<T>> {
    quantize_tensor_with(w, bits, group_size, true)
}

pub fn quantize_tensor_with<T: Scalar>(
    w: &Matrix<T>,
    bits: u8,
    group_size: usize,
    cache: bool,
) -> Result<QTensor<T>> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(TaqError::InvalidInput("group_size must be positive".into()));
    }
    let flat = w.as_slice();
    let mut codes = Vec::with_capacity(flat.len());
    let mut params = Vec::with_capacity(flat.len().div_ceil(group_size));
    for chunk in flat.chunks(group_size) {
        let p = fit_minmax(chunk, bits)?;
        codes.extend(chunk.iter().map(|&x| p.code_of(x.as_f64())));
        params.push(p);
    }
    QTensor::from_parts(w.rows(), w.cols(), group_size, codes, params, cache)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantError {
    pub max_abs: f64,
    /// `‖W − deq(Q)‖_F / ‖W‖_F`; the absolute norm when `W` is all zeros.
    pub frobenius_rel: f64,
}

pub fn quant_error<T: Scalar>(w: &Matrix<T>, q: &QTensor<T>) -> Result<QuantError> {
    if w.shape() != q.shape() {
        return Err(TaqError::InvalidShape(format!(
            "quant_error: {:?} vs {:?}",
            w.shape(),
            q.shape()
        )));
    }
    let owned;
    let deq = match q.cached() {
        Some(c) => c,
        None => {
            owned = q.dequantize();
            &owned
        }
    };
    let (mut max_abs, mut diff2, mut norm2) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in w.as_slice().iter().zip(deq.as_slice()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        let d = a - b;
        max_abs = max_abs.max(d.abs());
        diff2 += d * d;
        norm2 += a * a;
    }
    let frobenius_rel = if norm2 > 0.0 {
        (diff2 / norm2).sqrt()
    } else {
        diff2.sqrt()
    };
    Ok(QuantError {
        max_abs,
        frobenius_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rng_normal, SeededRng};
    use proptest::prelude::*;

    fn random(r: usize, c: usize, seed: u64) -> Matrix<f64> {
        Matrix::from_vec(r, c, rng_normal(&mut SeededRng::new(seed), r * c)).unwrap()
    }

    #[test]
    fn partition_arithmetic() {
        let q = quantize_tensor(&random(2, 2, 1), 8, 4).unwrap();
        assert_eq!(q.n_groups(), 1);
        let q = quantize_tensor(&random(1, 300, 1), 8, 128).unwrap();
        let sizes: Vec<usize> = (0..q.n_groups()).map(|g| q.group_range(g).len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
    }

    #[test]
    fn sixteen_bit_is_near_lossless() {
        let w = random(32, 64, 3);
        let q = quantize_tensor(&w, 16, 128).unwrap();
        assert!(quant_error(&w, &q).unwrap().frobenius_rel < 1e-3);
    }

    #[test]
    fn lattice_exact_tensor_has_zero_error() {
        // Every group spans 0..15 in unit steps, so 4-bit min-max is exact.
        let data: Vec<f64> = (0..64).map(|i| (i % 16) as f64).collect();
        let w = Matrix::from_vec(4, 16, data).unwrap();
        let q = quantize_tensor(&w, 4, 16).unwrap();
        let e = quant_error(&w, &q).unwrap();
        assert_eq!((e.max_abs, e.frobenius_rel), (0.0, 0.0));
    }

    #[test]
    fn constant_tensor() {
        let w = Matrix::from_vec(3, 5, vec![-0.7; 15]).unwrap();
        let q = quantize_tensor(&w, 4, 4).unwrap();
        assert!(quant_error(&w, &q).unwrap().max_abs <= 1e-12);
    }

    #[test]
    fn more_bits_less_error() {
        let w = random(8, 8, 12);
        let e4 = quant_error(&w, &quantize_tensor(&w, 4, 128).unwrap()).unwrap();
        let e8 = quant_error(&w, &quantize_tensor(&w, 8, 128).unwrap()).unwrap();
        assert!(e8.frobenius_rel < e4.frobenius_rel);
        assert!(e8.max_abs < e4.max_abs);
    }

    #[test]
    fn shape_mismatch() {
        let q = quantize_tensor(&random(2, 3, 1), 8, 4).unwrap();
        assert!(quant_error(&random(3, 2, 1), &q).is_err());
    }

    #[test]
    fn refit_keeps_cache_coherent() {
        let w = random(4, 64, 8);
        let mut q = quantize_tensor(&w, 4, 128).unwrap();
        let p = super::super::fit_scaled(&w.as_slice()[128..], 4, 0.8).unwrap();
        q.refit_group(1, w.as_slice(), p).unwrap();
        assert_eq!(q.cached().unwrap(), &q.dequantize());
        assert_eq!(q.params()[1], p);
    }

    #[test]
    fn corrupt_parts_rejected() {
        let p = QuantParams::new(1.0, 0.0, 4).unwrap();
        let r = QTensor::<f64>::from_parts(1, 2, 2, vec![1, 17], vec![p], false);
        assert!(matches!(r, Err(TaqError::CorruptCodes(_))));
        let r = QTensor::<f64>::from_parts(1, 3, 2, vec![1, 1, 1], vec![p], false);
        assert!(matches!(r, Err(TaqError::InvalidShape(_))));
    }

    proptest! {
        #[test]
        fn monotone_precision(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..60, gs in 1usize..130) {
            let w = random(rows, cols, seed);
            let errs: Vec<f64> = [4u8, 8, 16]
                .iter()
                .map(|&b| quant_error(&w, &quantize_tensor(&w, b, gs).unwrap()).unwrap().frobenius_rel)
                .collect();
            // groups of one or two elements are exact at every width, up to rounding
            let slack = 1e-14;
            prop_assert!(errs[0] + slack >= errs[1] && errs[1] + slack >= errs[2], "{:?}", errs);
        }

        #[test]
        fn deterministic_and_cache_coherent(seed in any::<u64>()) {
            let w = random(5, 40, seed);
            let a = quantize_tensor(&w, 4, 32).unwrap();
            let b = quantize_tensor(&w, 4, 32).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.cached().unwrap(), &a.dequantize());
        }
    }
}
