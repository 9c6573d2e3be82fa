//! File front end for the EMQ codec.
//!
//! Plain-text vectors hold one number per line; blank lines and lines
//! starting with `#` are skipped. Encoded files are the raw wire bytes.

use anyhow::{anyhow, Context, Result};
use cellfed_core::emq::{
    decode_bits, dequantize, encode_bits, quantize_with, BitStream, EmqCode, OverflowPolicy,
};

pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.trim()))
        .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
        .map(|(n, line)| {
            line.parse::<f64>()
                .with_context(|| format!("line {n}: `{line}` is not a number"))
        })
        .collect()
}

/// Shortest round-tripping decimal form, one value per line.
pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

pub fn encode(values: &[f64], policy: OverflowPolicy) -> Result<(EmqCode, Vec<u8>)> {
    let (code, _) = quantize_with(values, policy)?;
    let bytes = encode_bits(&code).into_bytes();
    Ok((code, bytes))
}

pub fn decode(bytes: Vec<u8>, dim: usize) -> Result<Vec<f64>> {
    let code = decode_bits(&BitStream::from_bytes(bytes), dim)
        .map_err(|e| anyhow!("cannot decode stream: {e}"))?;
    Ok(dequantize(&code).into_inner())
}
