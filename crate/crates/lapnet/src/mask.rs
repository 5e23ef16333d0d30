//! Binary keep/drop masks over a layer's weight tensor.

use crate::error::{LapError, Result};

/// Keep (`true`) / drop (`false`) decision per weight entry of one layer,
/// in the weight tensor's flat index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub layer: usize,
    pub bits: Vec<bool>,
    /// Number of `true` bits; kept in sync by construction.
    pub surviving: usize,
}

impl Mask {
    pub fn new(layer: usize, bits: Vec<bool>) -> Result<Mask> {
        if bits.is_empty() {
            return Err(LapError::InvalidArgument("mask must be nonempty".into()));
        }
        let surviving = bits.iter().filter(|&&b| b).count();
        Ok(Mask {
            layer,
            bits,
            surviving,
        })
    }

    /// All-keep mask of the given length.
    pub fn full(layer: usize, len: usize) -> Result<Mask> {
        Mask::new(layer, vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn surviving_fraction(&self) -> f64 {
        self.surviving as f64 / self.bits.len() as f64
    }

    /// Pack to bytes, LSB-first within each byte, for serialization.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Inverse of [`pack_bits`]; `len` recovers the trailing partial byte.
    pub fn unpack_bits(layer: usize, bytes: &[u8], len: usize) -> Result<Mask> {
        if bytes.len() != len.div_ceil(8) {
            return Err(LapError::Format(format!(
                "mask byte count {} does not match bit length {len}",
                bytes.len()
            )));
        }
        let bits = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Mask::new(layer, bits)
    }
}
