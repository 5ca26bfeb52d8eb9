//! Group-wise asymmetric uniform quantization.
//!
//! A weight matrix is flattened row-major and cut into consecutive groups of `group_size`
//! values (the last group may be short). Each group gets its own scale `s` and zero-point
//! `z`; a value maps to `clamp(round((x − z)/s), 0, 2^bits − 1)` and back to `code·s + z`.

mod group;
pub mod pack;
mod tensor;

pub use group::{
    dequantize_group, fit_minmax, fit_scaled, quantize_group, QuantParams, SCALE_FLOOR,
};
pub use tensor::{quant_error, quantize_tensor, quantize_tensor_with, QTensor, QuantError};

use crate::error::{Result, TaqError};

/// Admissible quantized bitwidths.
pub const ADMISSIBLE_BITS: [u8; 3] = [4, 8, 16];

pub const DEFAULT_GROUP_SIZE: usize = 128;

pub fn check_bits(bits: u8) -> Result<u8> {
    if ADMISSIBLE_BITS.contains(&bits) {
        Ok(bits)
    } else {
        Err(TaqError::InvalidInput(format!(
            "bitwidth {bits} not in {ADMISSIBLE_BITS:?}"
        )))
    }
}

/// Largest code representable at `bits`.
#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}
