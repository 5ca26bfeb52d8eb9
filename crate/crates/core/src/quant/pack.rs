//! Little-endian bit packing of quantization codes.
//!
//! 4-bit codes go two per byte, low nibble first; 8-bit codes one per byte; 16-bit codes as
//! little-endian `u16`. A trailing half-filled byte is zero padded.

use crate::error::{Result, TaqError};

use super::check_bits;

pub fn packed_len(n_codes: usize, bits: u8) -> usize {
    (n_codes * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u16], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    match bits {
        4 => {
            for pair in codes.chunks(2) {
                let lo = pair[0];
                let hi = pair.get(1).copied().unwrap_or(0);
                if lo > 0xF || hi > 0xF {
                    return Err(TaqError::CorruptCodes(format!("4-bit pack of {lo}/{hi}")));
                }
                out.push((lo | (hi << 4)) as u8);
            }
        }
        8 => {
            for &c in codes {
                out.push(
                    u8::try_from(c)
                        .map_err(|_| TaqError::CorruptCodes(format!("8-bit pack of {c}")))?,
                );
            }
        }
        _ => {
            for &c in codes {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n_codes: usize) -> Result<Vec<u16>> {
    check_bits(bits)?;
    if bytes.len() != packed_len(n_codes, bits) {
        return Err(TaqError::Format(format!(
            "{} packed bytes for {n_codes} codes at {bits} bits",
            bytes.len()
        )));
    }
    let codes = match bits {
        4 => bytes
            .iter()
            .flat_map(|&b| [(b & 0xF) as u16, (b >> 4) as u16])
            .take(n_codes)
            .collect(),
        8 => bytes.iter().map(|&b| b as u16).collect(),
        _ => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
    };
    Ok(codes)
}
