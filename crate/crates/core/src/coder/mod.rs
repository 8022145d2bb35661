//! Quantized-CDF entropy coding.
//!
//! [`RansCoder`] is the built-in implementation. [`ffi`] describes the flat
//! three-call boundary through which an external coder with the same byte
//! format can be plugged in.

pub mod ffi;
pub mod rans;

use crate::error::{Error, Result};

pub use rans::{RansCoder, RansDecoder, RansEncoder};

/// Frequency precision in bits; every table sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Cumulative frequencies `cdf[0] = 0 < cdf[1] < … < cdf[n] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn new(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 {
            return Err(Error::InvalidTable("needs at least one symbol".into()));
        }
        if cdf.len() - 1 > 256 {
            return Err(Error::InvalidTable(format!("{} symbols exceed 256", cdf.len() - 1)));
        }
        if cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(Error::InvalidTable(format!(
                "endpoints are {} and {}, expected 0 and {TOTAL}",
                cdf[0],
                cdf.last().unwrap()
            )));
        }
        if cdf.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTable("not strictly increasing".into()));
        }
        Ok(Self { cdf })
    }

    /// Quantizes a probability vector. Every symbol keeps frequency ≥ 1 and
    /// the rounding remainder goes to the most probable symbol, so the build
    /// is a deterministic function of the input bits.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n > 256 {
            return Err(Error::InvalidTable(format!("{n} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidTable("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = pmf.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidTable("probabilities sum to zero".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut freq: Vec<u32> = pmf.iter().map(|p| 1 + (p / sum * spare).floor() as u32).collect();
        let used: u32 = freq.iter().sum();
        let top = pmf
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        freq[top] += TOTAL - used;
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Self::new(cdf)
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn start(&self, symbol: usize) -> u32 {
        self.cdf[symbol]
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cdf[symbol + 1] - self.cdf[symbol]
    }

    /// Symbol whose interval contains `slot ∈ [0, 2^16)`.
    pub fn lookup(&self, slot: u32) -> usize {
        self.cdf.partition_point(|&c| c <= slot) - 1
    }

    /// Ideal code length of `symbol` in bits under the quantized table.
    pub fn bits(&self, symbol: usize) -> f64 {
        PRECISION as f64 - (self.freq(symbol) as f64).log2()
    }
}

/// An entropy-coded payload with its checksum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedBuffer {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
    pub checksum: u32,
}

impl CodedBuffer {
    pub fn new(bytes: Vec<u8>, symbol_count: usize) -> Self {
        let checksum = crc32fast::hash(&bytes);
        Self { bytes, symbol_count, checksum }
    }

    pub fn verify(&self) -> Result<()> {
        let computed = crc32fast::hash(&self.bytes);
        if computed != self.checksum {
            return Err(Error::Checksum { stored: self.checksum, computed });
        }
        Ok(())
    }

    /// Bytes followed by the big-endian CRC-32.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = self.bytes.clone();
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out
    }

    pub fn from_payload(payload: &[u8], symbol_count: usize) -> Result<Self> {
        if payload.len() < 4 {
            return Err(Error::Corrupt(format!("payload of {} bytes has no checksum", payload.len())));
        }
        let (bytes, crc) = payload.split_at(payload.len() - 4);
        let checksum = u32::from_be_bytes(crc.try_into().unwrap());
        Ok(Self { bytes: bytes.to_vec(), symbol_count, checksum })
    }
}

/// Incremental decoder over one coded buffer.
pub trait SymbolDecoder {
    /// Decodes one symbol per table, in order.
    fn decode(&mut self, tables: &[&CdfTable]) -> Result<Vec<usize>>;

    /// Confirms the whole buffer was consumed.
    fn finish(self: Box<Self>) -> Result<()>;
}

/// Encoder/decoder pair sharing one byte format.
pub trait EntropyCoder {
    fn encode(&self, symbols: &[usize], tables: &[&CdfTable]) -> Result<CodedBuffer>;

    /// Verifies the checksum and opens an incremental decoder.
    fn decoder<'a>(&self, buffer: &'a CodedBuffer) -> Result<Box<dyn SymbolDecoder + 'a>>;

    /// One-shot decode of `buffer.symbol_count` symbols, one table each.
    fn decode(&self, buffer: &CodedBuffer, tables: &[&CdfTable]) -> Result<Vec<usize>> {
        if tables.len() != buffer.symbol_count {
            return Err(Error::Shape(format!(
                "{} tables for {} symbols",
                tables.len(),
                buffer.symbol_count
            )));
        }
        let mut dec = self.decoder(buffer)?;
        let out = dec.decode(tables)?;
        dec.finish()?;
        Ok(out)
    }
}

/// Shannon information `Σ −log2 p(s)` of a symbol stream under its tables.
pub fn ideal_bits(symbols: &[usize], tables: &[&CdfTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&s, t)| t.bits(s)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_quantization_keeps_every_symbol() {
        let t = CdfTable::from_pmf(&[1.0, 0.0, 1e-12, 3.0]).unwrap();
        assert_eq!(t.cdf()[0], 0);
        assert_eq!(*t.cdf().last().unwrap(), TOTAL);
        for s in 0..4 {
            assert!(t.freq(s) >= 1);
        }
        assert!(t.freq(3) > 2 * t.freq(0));
    }

    #[test]
    fn lookup_inverts_start() {
        let t = CdfTable::from_pmf(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for s in 0..4 {
            assert_eq!(t.lookup(t.start(s)), s);
            assert_eq!(t.lookup(t.start(s) + t.freq(s) - 1), s);
        }
    }

    #[test]
    fn invalid_tables() {
        assert!(CdfTable::new(vec![0, 10, 10, TOTAL]).is_err());
        assert!(CdfTable::new(vec![1, TOTAL]).is_err());
        assert!(CdfTable::new(vec![0]).is_err());
        assert!(CdfTable::new(vec![0, TOTAL]).is_ok());
        assert!(CdfTable::from_pmf(&[0.0, 0.0]).is_err());
        assert!(CdfTable::from_pmf(&vec![1.0; 257]).is_err());
    }

    #[test]
    fn payload_round_trip() {
        let b = CodedBuffer::new(vec![1, 2, 3], 7);
        let p = b.to_payload();
        let back = CodedBuffer::from_payload(&p, 7).unwrap();
        assert_eq!(back, b);
        back.verify().unwrap();
        let mut bad = p.clone();
        bad[0] ^= 1;
        assert!(matches!(CodedBuffer::from_payload(&bad, 7).unwrap().verify(), Err(Error::Checksum { .. })));
    }
}
