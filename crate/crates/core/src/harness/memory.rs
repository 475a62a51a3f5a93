//! Analytic storage estimate. This is arithmetic on parameter counts, not a
//! measurement.

use serde::{Deserialize, Serialize};

use crate::tensor::Model;

/// Bits stored per layer besides the weights: two 32-bit clip bounds and a
/// 32-bit level count.
pub const SPEC_OVERHEAD_BITS: u64 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub fp_bytes: f64,
    pub quant_bytes: f64,
    pub ratio: f64,
    pub bits_w: u32,
    /// Echoed only; activations are not stored.
    pub bits_a: u32,
}

impl MemoryEstimate {
    pub fn from_counts(weights: u64, layers: u64, bits_w: u32, bits_a: u32) -> Self {
        let fp_bits = 32.0 * weights as f64;
        let quant_bits = bits_w as f64 * weights as f64 + (SPEC_OVERHEAD_BITS * layers) as f64;
        Self {
            fp_bytes: fp_bits / 8.0,
            quant_bytes: quant_bits / 8.0,
            ratio: if quant_bits > 0.0 {
                fp_bits / quant_bits
            } else {
                1.0
            },
            bits_w,
            bits_a,
        }
    }
}

pub fn memory_estimate(model: &Model, bits_w: u32, bits_a: u32) -> MemoryEstimate {
    MemoryEstimate::from_counts(
        model.weight_count() as u64,
        model.n_layers() as u64,
        bits_w,
        bits_a,
    )
}
