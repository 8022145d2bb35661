//! Byte-wise rANS with a 32-bit state and 16-bit frequencies.
//!
//! Symbols are pushed in reverse so the decoder reads them forward. The
//! stream starts with the final encoder state, little-endian, followed by
//! the renormalization bytes in decoding order.

use crate::coder::{CdfTable, CodedBuffer, EntropyCoder, SymbolDecoder, PRECISION};
use crate::error::{Error, Result};

const RANS_L: u32 = 1 << 23;
const MASK: u32 = (1 << PRECISION) - 1;

/// Encoder state. Symbols must be supplied in reverse decoding order.
#[derive(Debug)]
pub struct RansEncoder {
    state: u32,
    reversed: Vec<u8>,
    count: usize,
}

impl Default for RansEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RansEncoder {
    pub fn new() -> Self {
        Self { state: RANS_L, reversed: Vec::new(), count: 0 }
    }

    pub fn put(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0);
        let x_max = ((RANS_L >> PRECISION) << 8) * freq;
        let mut x = self.state;
        while x >= x_max {
            self.reversed.push((x & 0xff) as u8);
            x >>= 8;
        }
        self.state = ((x / freq) << PRECISION) + (x % freq) + start;
        self.count += 1;
    }

    pub fn finish(mut self) -> CodedBuffer {
        let x = self.state;
        self.reversed.extend_from_slice(&[(x >> 24) as u8, (x >> 16) as u8, (x >> 8) as u8, x as u8]);
        self.reversed.reverse();
        CodedBuffer::new(self.reversed, self.count)
    }
}

/// Forward decoder over a verified buffer.
#[derive(Debug)]
pub struct RansDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    state: u32,
    decoded: usize,
    expected: usize,
}

impl<'a> RansDecoder<'a> {
    /// Starts decoding at a saved `(state, position)` cursor.
    pub fn resume(bytes: &'a [u8], state: u32, pos: usize, expected: usize) -> Self {
        Self { bytes, pos, state, decoded: 0, expected }
    }

    pub fn new(bytes: &'a [u8], expected: usize) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Underflow { decoded: 0, expected });
        }
        let state = u32::from_le_bytes(bytes[..4].try_into().unwrap());
        if state < RANS_L {
            return Err(Error::Corrupt(format!("initial state {state:#x} below the renormalization bound")));
        }
        Ok(Self { bytes, pos: 4, state, decoded: 0, expected })
    }

    pub fn cursor(&self) -> (u32, usize) {
        (self.state, self.pos)
    }

    pub fn get(&mut self, table: &CdfTable) -> Result<usize> {
        let slot = self.state & MASK;
        let s = table.lookup(slot);
        let mut x = table.freq(s) * (self.state >> PRECISION) + slot - table.start(s);
        while x < RANS_L {
            let Some(&b) = self.bytes.get(self.pos) else {
                return Err(Error::Underflow { decoded: self.decoded, expected: self.expected });
            };
            x = (x << 8) | b as u32;
            self.pos += 1;
        }
        self.state = x;
        self.decoded += 1;
        Ok(s)
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len() && self.state == RANS_L
    }
}

impl SymbolDecoder for RansDecoder<'_> {
    fn decode(&mut self, tables: &[&CdfTable]) -> Result<Vec<usize>> {
        tables.iter().map(|t| self.get(t)).collect()
    }

    fn finish(self: Box<Self>) -> Result<()> {
        if self.is_exhausted() {
            Ok(())
        } else {
            Err(Error::Corrupt(format!(
                "{} trailing bytes after {} symbols",
                self.bytes.len() - self.pos,
                self.decoded
            )))
        }
    }
}

/// Pure-Rust coder; the reference byte format.
#[derive(Clone, Copy, Debug, Default)]
pub struct RansCoder;

impl EntropyCoder for RansCoder {
    fn encode(&self, symbols: &[usize], tables: &[&CdfTable]) -> Result<CodedBuffer> {
        if symbols.len() != tables.len() {
            return Err(Error::Shape(format!("{} symbols with {} tables", symbols.len(), tables.len())));
        }
        let mut enc = RansEncoder::new();
        for (&s, t) in symbols.iter().zip(tables).rev() {
            if s >= t.num_symbols() {
                return Err(Error::SymbolOutOfAlphabet { symbol: s as i64, size: t.num_symbols() });
            }
            enc.put(t.start(s), t.freq(s));
        }
        Ok(enc.finish())
    }

    fn decoder<'a>(&self, buffer: &'a CodedBuffer) -> Result<Box<dyn SymbolDecoder + 'a>> {
        buffer.verify()?;
        Ok(Box::new(RansDecoder::new(&buffer.bytes, buffer.symbol_count)?))
    }
}
