//! Exponent-Mantissa Quantization (EMQ).
//!
//! A delta vector is represented by one shared decimal exponent `u`, a sign
//! per element and a rounded single-digit mantissa per element:
//!
//! ```text
//! v_i ~= s_i * m_i * 10^u,   u = floor(log10 ||v||_inf),   m_i in {0..9}
//! ```
//!
//! Wire layout, MSB first:
//!
//! ```text
//! [exponent: 8 bits two's complement, -128 = zero vector]
//! [signs: d bits, 1 = positive]
//! [mantissa codewords: 0 -> "0", 1 -> "10", m in 2..=9 -> "11" + 3-bit (m - 2)]
//! [zero padding to a byte boundary]
//! ```

mod bits;

pub use bits::{BitReader, BitStream, BitWriter};

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Bits spent on the shared exponent.
pub const EXPONENT_BITS: usize = 8;
/// Exponent byte reserved for the all-zero vector.
pub const ZERO_VECTOR_EXPONENT: i8 = i8::MIN;
/// Smallest exponent a non-zero vector may carry.
pub const MIN_EXPONENT: i32 = -127;
pub const MAX_EXPONENT: i32 = 127;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("vector contains a non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("decimal exponent {exponent} is outside [{MIN_EXPONENT}, {MAX_EXPONENT}]")]
    ExponentOutOfRange { exponent: i32 },
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("mantissa {value} at index {index} is not a single digit")]
    InvalidMantissa { index: usize, value: u8 },
    #[error("zero-vector code must have exponent 0, positive signs and zero mantissas")]
    MalformedZeroVector,
    #[error("bit stream ended at bit {position} while decoding a code of dimension {dim}")]
    TruncatedStream { position: usize, dim: usize },
}

/// Model-update vector `w_k^j - w_{k-1}`; all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector(Vec<f64>);

impl DeltaVector {
    pub fn new(values: Vec<f64>) -> Result<Self, CodecError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// `current - base`, elementwise.
    pub fn between(current: &[f64], base: &[f64]) -> Result<Self, CodecError> {
        if current.len() != base.len() {
            return Err(CodecError::DimensionMismatch {
                expected: base.len(),
                actual: current.len(),
            });
        }
        Self::new(current.iter().zip(base).map(|(c, b)| c - b).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.0)
    }
}

impl AsRef<[f64]> for DeltaVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    pub fn of(x: f64) -> Self {
        if x < 0.0 {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Negative => -1.0,
            Sign::Positive => 1.0,
        }
    }
}

/// How to treat an element whose rounded mantissa would be 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    /// Clamp the mantissa to 9. Per-element error is then below `10^u`.
    #[default]
    Clamp,
    /// Re-quantize the whole vector with exponent `u + 1`, keeping every
    /// element within `0.5 * 10^u'` of its source.
    Promote,
}

/// Quantized form of one delta vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmqCode {
    exponent: i8,
    signs: Vec<Sign>,
    mantissas: Vec<u8>,
    zero_vector: bool,
}

impl EmqCode {
    pub fn new(
        exponent: i32,
        signs: Vec<Sign>,
        mantissas: Vec<u8>,
        zero_vector: bool,
    ) -> Result<Self, CodecError> {
        if signs.len() != mantissas.len() {
            return Err(CodecError::DimensionMismatch {
                expected: signs.len(),
                actual: mantissas.len(),
            });
        }
        if let Some(index) = mantissas.iter().position(|&m| m > 9) {
            return Err(CodecError::InvalidMantissa {
                index,
                value: mantissas[index],
            });
        }
        if zero_vector {
            let clean = exponent == 0
                && mantissas.iter().all(|&m| m == 0)
                && signs.iter().all(|&s| s == Sign::Positive);
            if !clean {
                return Err(CodecError::MalformedZeroVector);
            }
        } else if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent) {
            return Err(CodecError::ExponentOutOfRange { exponent });
        }
        Ok(Self {
            exponent: exponent as i8,
            signs,
            mantissas,
            zero_vector,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            exponent: 0,
            signs: vec![Sign::Positive; dim],
            mantissas: vec![0; dim],
            zero_vector: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.mantissas.len()
    }

    pub fn exponent(&self) -> i32 {
        i32::from(self.exponent)
    }

    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    pub fn mantissas(&self) -> &[u8] {
        &self.mantissas
    }

    pub fn is_zero_vector(&self) -> bool {
        self.zero_vector
    }

    /// Exponent as seen on the wire, `None` for the zero vector.
    pub fn wire_exponent(&self) -> Option<i32> {
        (!self.zero_vector).then(|| self.exponent())
    }
}

/// Extra information produced while quantizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantizeReport {
    /// Elements whose mantissa was clamped from 10 to 9.
    pub clamped: usize,
    /// Whether the exponent was promoted to avoid a mantissa of 10.
    pub promoted: bool,
}

/// Correctly rounded `10^u` for the exponent range the codec can see.
pub fn pow10(u: i32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    const LO: i32 = -330;
    const HI: i32 = 330;
    let table = TABLE.get_or_init(|| {
        (LO..=HI)
            .map(|e| format!("1e{e}").parse::<f64>().expect("decimal literal"))
            .collect()
    });
    if u < LO {
        0.0
    } else if u > HI {
        f64::INFINITY
    } else {
        table[(u - LO) as usize]
    }
}

/// `floor(log10 ||v||_inf)`, or `Ok(None)` when the vector is all zeros.
pub fn compute_exponent(v: &[f64]) -> Result<Option<i32>, CodecError> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(CodecError::NonFinite { index });
    }
    let norm = inf_norm(v);
    if norm == 0.0 {
        return Ok(None);
    }
    let mut u = norm.log10().floor() as i32;
    // log10 can be off by one ulp around exact powers of ten.
    if pow10(u) > norm {
        u -= 1;
    } else if pow10(u + 1) <= norm {
        u += 1;
    }
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&u) {
        return Err(CodecError::ExponentOutOfRange { exponent: u });
    }
    Ok(Some(u))
}

/// Quantizes with the default clamp policy.
pub fn quantize(v: &DeltaVector) -> Result<EmqCode, CodecError> {
    quantize_with(v.as_slice(), OverflowPolicy::Clamp).map(|(code, _)| code)
}

pub fn quantize_with(
    v: &[f64],
    policy: OverflowPolicy,
) -> Result<(EmqCode, QuantizeReport), CodecError> {
    let Some(mut u) = compute_exponent(v)? else {
        return Ok((EmqCode::zero(v.len()), QuantizeReport::default()));
    };
    let mut report = QuantizeReport::default();
    let overflows = |u: i32| v.iter().any(|x| (x.abs() / pow10(u)).round() >= 10.0);
    if policy == OverflowPolicy::Promote && overflows(u) {
        u += 1;
        if u > MAX_EXPONENT {
            return Err(CodecError::ExponentOutOfRange { exponent: u });
        }
        report.promoted = true;
    }
    let scale = pow10(u);
    let mut signs = Vec::with_capacity(v.len());
    let mut mantissas = Vec::with_capacity(v.len());
    for &x in v {
        signs.push(Sign::of(x));
        let rounded = (x.abs() / scale).round();
        if rounded >= 10.0 {
            report.clamped += 1;
            mantissas.push(9);
        } else {
            mantissas.push(rounded as u8);
        }
    }
    Ok((
        EmqCode {
            exponent: u as i8,
            signs,
            mantissas,
            zero_vector: false,
        },
        report,
    ))
}

/// `s_i * m_i * 10^u` for every element.
pub fn dequantize(code: &EmqCode) -> DeltaVector {
    if code.zero_vector {
        return DeltaVector::zeros(code.dim());
    }
    let scale = pow10(code.exponent());
    DeltaVector(
        code.signs
            .iter()
            .zip(&code.mantissas)
            .map(|(s, &m)| {
                if m == 0 {
                    0.0
                } else {
                    s.factor() * f64::from(m) * scale
                }
            })
            .collect(),
    )
}

/// Length in bits of the prefix-free codeword for a mantissa digit.
pub fn codeword_length(mantissa: u8) -> usize {
    match mantissa {
        0 => 1,
        1 => 2,
        _ => 5,
    }
}

fn write_codeword(w: &mut BitWriter, mantissa: u8) {
    match mantissa {
        0 => w.push_bit(false),
        1 => w.push_bits(0b10, 2),
        m => {
            w.push_bits(0b11, 2);
            w.push_bits(u32::from(m - 2), 3);
        }
    }
}

fn read_codeword(r: &mut BitReader<'_>) -> Option<u8> {
    if !r.read_bit()? {
        return Some(0);
    }
    if !r.read_bit()? {
        return Some(1);
    }
    Some(r.read_bits(3)? as u8 + 2)
}

/// Total payload bits `8 + d + sum(codeword lengths)`, excluding padding.
pub fn bit_count(code: &EmqCode) -> usize {
    EXPONENT_BITS
        + code.dim()
        + code
            .mantissas
            .iter()
            .map(|&m| codeword_length(m))
            .sum::<usize>()
}

/// Upper bound `8 + 6d` on [`bit_count`].
pub fn max_bit_count(dim: usize) -> usize {
    EXPONENT_BITS + 6 * dim
}

pub fn encode_bits(code: &EmqCode) -> BitStream {
    let mut w = BitWriter::with_capacity_bits(bit_count(code));
    let exponent_byte = if code.zero_vector {
        ZERO_VECTOR_EXPONENT
    } else {
        code.exponent
    };
    w.push_bits(u32::from(exponent_byte as u8), 8);
    for &s in &code.signs {
        w.push_bit(s == Sign::Positive);
    }
    for &m in &code.mantissas {
        write_codeword(&mut w, m);
    }
    w.finish()
}

pub fn decode_bits(stream: &BitStream, dim: usize) -> Result<EmqCode, CodecError> {
    let mut r = BitReader::new(stream);
    let truncated = |r: &BitReader<'_>| CodecError::TruncatedStream {
        position: r.position(),
        dim,
    };
    let exponent_byte = r.read_bits(8).ok_or_else(|| truncated(&r))? as u8 as i8;
    let mut signs = Vec::with_capacity(dim);
    for _ in 0..dim {
        let bit = r.read_bit().ok_or_else(|| truncated(&r))?;
        signs.push(if bit { Sign::Positive } else { Sign::Negative });
    }
    let mut mantissas = Vec::with_capacity(dim);
    for _ in 0..dim {
        mantissas.push(read_codeword(&mut r).ok_or_else(|| truncated(&r))?);
    }
    if exponent_byte == ZERO_VECTOR_EXPONENT {
        EmqCode::new(0, signs, mantissas, true)
    } else {
        EmqCode::new(i32::from(exponent_byte), signs, mantissas, false)
    }
}

/// Per-element quantization error bounds for exponent `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBound {
    /// `0.5 * 10^u`, valid for elements whose mantissa was not clamped.
    pub strict: f64,
    /// `10^u`, valid for every element under the clamp policy.
    pub relaxed: f64,
}

pub fn error_bound(u: i32) -> ErrorBound {
    ErrorBound {
        strict: 5.0 * pow10(u - 1),
        relaxed: 10.0 * pow10(u - 1),
    }
}
