//! MSB-first bit packing used by the EMQ wire format.

use serde::{Deserialize, Serialize};

/// A packed bit sequence. Bits past `bit_length` in the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_length: usize,
}

impl BitStream {
    /// Wraps raw bytes; every bit is considered valid.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let bit_length = bytes.len() * 8;
        Self { bytes, bit_length }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_length(&self) -> usize {
        self.bit_length
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Returns the bit at `pos`, or `None` past the end.
    pub fn bit(&self, pos: usize) -> Option<bool> {
        if pos >= self.bit_length {
            return None;
        }
        Some(self.bytes[pos / 8] & (0x80 >> (pos % 8)) != 0)
    }

    /// Renders the valid bits as a string of `0`/`1`.
    pub fn to_bit_string(&self) -> String {
        (0..self.bit_length)
            .map(|i| if self.bit(i) == Some(true) { '1' } else { '0' })
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_length: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            bit_length: 0,
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.bit_length.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 0x80 >> (self.bit_length % 8);
        }
        self.bit_length += 1;
    }

    /// Writes the low `len` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u32, len: u32) {
        debug_assert!(len <= 32);
        for shift in (0..len).rev() {
            self.push_bit((value >> shift) & 1 == 1);
        }
    }

    pub fn bit_length(&self) -> usize {
        self.bit_length
    }

    pub fn finish(self) -> BitStream {
        BitStream {
            bytes: self.bytes,
            bit_length: self.bit_length,
        }
    }
}

pub struct BitReader<'a> {
    stream: &'a BitStream,
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(stream: &'a BitStream) -> Self {
        Self { stream, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn read_bit(&mut self) -> Option<bool> {
        let bit = self.stream.bit(self.pos)?;
        self.pos += 1;
        Some(bit)
    }

    pub fn read_bits(&mut self, len: u32) -> Option<u32> {
        let mut value = 0u32;
        for _ in 0..len {
            value = (value << 1) | u32::from(self.read_bit()?);
        }
        Some(value)
    }
}
