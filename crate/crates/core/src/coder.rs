//! Byte-oriented range coder over 16-bit cumulative frequencies, with
//! carry propagation through a cached byte and a run of pending 0xFF bytes.

use crate::error::CoderError;
use crate::prob::{CoderInterval, FREQ_BITS, FREQ_TOTAL};

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    /// Bytes withheld until the carry into them is known: `cache` plus
    /// `pending - 1` bytes of 0xFF.
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    /// Narrows the current range to `[lo, hi) / 2^16`.
    pub fn encode(&mut self, iv: CoderInterval) -> Result<(), CoderError> {
        if iv.lo >= iv.hi || iv.hi > FREQ_TOTAL {
            return Err(CoderError::InvalidInterval {
                lo: iv.lo,
                hi: iv.hi,
            });
        }
        let r = self.range >> FREQ_BITS;
        self.low += u64::from(r) * u64::from(iv.lo);
        self.range = r * (iv.hi - iv.lo);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    /// Convenience for raw `(lo, hi)` pairs.
    pub fn encode_raw(&mut self, lo: u32, hi: u32) -> Result<(), CoderError> {
        self.encode(CoderInterval { lo, hi })
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Bytes emitted so far (excluding withheld ones).
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    /// Range scaled by the last `target` call.
    step: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            step: 0,
        };
        // the encoder's first byte is always the initial zero cache
        for _ in 0..5 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(CoderError::TruncatedPayload)?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative frequency the next symbol's interval must contain.
    pub fn target(&mut self) -> Result<u32, CoderError> {
        self.step = self.range >> FREQ_BITS;
        let f = self.code / self.step;
        if f >= FREQ_TOTAL {
            return Err(CoderError::CorruptTarget(f));
        }
        Ok(f)
    }

    /// Consumes the interval of the symbol just identified by [`target`].
    ///
    /// [`target`]: RangeDecoder::target
    pub fn update(&mut self, iv: CoderInterval) -> Result<(), CoderError> {
        if iv.lo >= iv.hi || iv.hi > FREQ_TOTAL {
            return Err(CoderError::InvalidInterval {
                lo: iv.lo,
                hi: iv.hi,
            });
        }
        self.code -= self.step * iv.lo;
        self.range = self.step * (iv.hi - iv.lo);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(())
    }

    /// Decodes a symbol given its known interval (no search needed).
    pub fn decode_known(&mut self, lo: u32, hi: u32) -> Result<(), CoderError> {
        self.target()?;
        self.update(CoderInterval { lo, hi })
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

/// Ideal code length of an interval sequence in bits.
pub fn ideal_bits(intervals: &[CoderInterval]) -> f64 {
    intervals.iter().map(CoderInterval::bits).sum()
}
