//! Comparison arms: a fixed-bit uniform quantizer and full-power allocation.

use serde::{Deserialize, Serialize};

use crate::emq::DeltaVector;

/// Bits used to transmit the `f32` scale of a fixed-bit code.
pub const SCALE_BITS: usize = 32;

/// Symmetric uniform quantization of a vector to `n_bits` signed levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedBitCode {
    n_bits: u32,
    scale: u32,
    levels: Vec<i64>,
}

impl FixedBitCode {
    pub fn n_bits(&self) -> u32 {
        self.n_bits
    }

    /// `||v||_inf` rounded up to the next `f32`.
    pub fn scale(&self) -> f64 {
        f64::from(f32::from_bits(self.scale))
    }

    pub fn levels(&self) -> &[i64] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn bit_count(&self) -> usize {
        SCALE_BITS + self.levels.len() * self.n_bits as usize
    }
}

fn max_level(n_bits: u32) -> i64 {
    (1i64 << (n_bits - 1)) - 1
}

/// `f32` no smaller than `x`.
fn f32_at_least(x: f64) -> f32 {
    let mut s = x as f32;
    if f64::from(s) < x {
        s = f32::from_bits(s.to_bits() + 1);
    }
    s
}

/// Quantizes `v` to levels in `[-(2^(n-1) - 1), 2^(n-1) - 1]` spanning
/// `[-scale, scale]`.
pub fn fixed_bit_quantize(v: &DeltaVector, n_bits: u32) -> FixedBitCode {
    assert!((2..=32).contains(&n_bits), "n_bits must be in 2..=32");
    let scale = f32_at_least(v.inf_norm());
    let q = max_level(n_bits);
    let levels = if scale == 0.0 {
        vec![0; v.dim()]
    } else {
        let s = f64::from(scale);
        v.as_slice()
            .iter()
            .map(|x| ((x / s) * q as f64).round().clamp(-q as f64, q as f64) as i64)
            .collect()
    };
    FixedBitCode {
        n_bits,
        scale: scale.to_bits(),
        levels,
    }
}

pub fn fixed_bit_dequantize(code: &FixedBitCode) -> DeltaVector {
    let q = max_level(code.n_bits) as f64;
    let s = code.scale();
    DeltaVector::new(code.levels.iter().map(|&l| l as f64 / q * s).collect())
        .expect("finite levels")
}

/// Guaranteed per-element error, `scale / (2^n - 2)`.
pub fn fixed_bit_error_bound(code: &FixedBitCode) -> f64 {
    code.scale() / ((1u64 << code.n_bits) - 2) as f64
}

/// Per-element bit width matching an average EMQ payload of `mean_bits`
/// for a `dim`-element vector: `floor(round(mean_bits) / dim)`, at least 2.
pub fn matched_bits_per_element(mean_bits: f64, dim: usize) -> u32 {
    let per = (mean_bits.round() / dim as f64).floor() as u32;
    per.clamp(2, 32)
}

pub fn full_power(m: usize) -> Vec<f64> {
    vec![1.0; m]
}
