//! Flat-buffer boundary for an external coder.
//!
//! An implementation provides three C-ABI calls over integer buffers:
//! `build_tables` (probabilities to quantized CDFs), `encode` and `decode`.
//! All tables of one call share a symbol count `n` and are laid out back to
//! back with stride `n + 1`. Decoding is resumable through a
//! [`DecodeCursor`] so stage-wise decoding can cross the boundary.
//! [`FALLBACK`] exposes the built-in coder through the same signatures.

use crate::coder::rans::{RansDecoder, RansEncoder};
use crate::coder::{CdfTable, CodedBuffer, EntropyCoder, SymbolDecoder};
use crate::error::{Error, Result};

pub const STATUS_OK: i32 = 0;
pub const STATUS_BAD_TABLE: i32 = 1;
pub const STATUS_SYMBOL_RANGE: i32 = 2;
pub const STATUS_CAPACITY: i32 = 3;
pub const STATUS_UNDERFLOW: i32 = 4;
pub const STATUS_CORRUPT: i32 = 5;

/// Decoder position between calls.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeCursor {
    pub state: u32,
    pub offset: u64,
}

pub type BuildTablesFn =
    unsafe extern "C" fn(pmf: *const f64, num_tables: usize, num_symbols: usize, cdf_out: *mut u32) -> i32;

pub type EncodeFn = unsafe extern "C" fn(
    symbols: *const u32,
    table_index: *const u32,
    count: usize,
    cdfs: *const u32,
    num_tables: usize,
    num_symbols: usize,
    out: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> i32;

pub type DecodeFn = unsafe extern "C" fn(
    bytes: *const u8,
    len: usize,
    cursor: *mut DecodeCursor,
    table_index: *const u32,
    count: usize,
    cdfs: *const u32,
    num_tables: usize,
    num_symbols: usize,
    symbols_out: *mut u32,
) -> i32;

#[derive(Clone, Copy, Debug)]
pub struct CoderVTable {
    pub build_tables: BuildTablesFn,
    pub encode: EncodeFn,
    pub decode: DecodeFn,
}

/// Safe flat-buffer entry points of the built-in coder.
pub mod flat {
    use super::*;

    fn tables(cdfs: &[u32], num_symbols: usize) -> Result<Vec<CdfTable>> {
        let stride = num_symbols + 1;
        if num_symbols == 0 || cdfs.len() % stride != 0 {
            return Err(Error::InvalidTable(format!("{} entries with stride {stride}", cdfs.len())));
        }
        cdfs.chunks(stride).map(|c| CdfTable::new(c.to_vec())).collect()
    }

    fn lookup<'t>(tables: &'t [CdfTable], index: u32) -> Result<&'t CdfTable> {
        tables
            .get(index as usize)
            .ok_or_else(|| Error::InvalidTable(format!("table index {index} of {}", tables.len())))
    }

    pub fn build_tables(pmf: &[f64], num_symbols: usize) -> Result<Vec<u32>> {
        if num_symbols == 0 || pmf.len() % num_symbols != 0 {
            return Err(Error::InvalidTable(format!("{} probabilities for {num_symbols} symbols", pmf.len())));
        }
        let mut out = Vec::with_capacity(pmf.len() / num_symbols * (num_symbols + 1));
        for p in pmf.chunks(num_symbols) {
            out.extend_from_slice(CdfTable::from_pmf(p)?.cdf());
        }
        Ok(out)
    }

    pub fn encode(symbols: &[u32], table_index: &[u32], cdfs: &[u32], num_symbols: usize) -> Result<Vec<u8>> {
        if symbols.len() != table_index.len() {
            return Err(Error::Shape(format!("{} symbols, {} table indices", symbols.len(), table_index.len())));
        }
        let tables = tables(cdfs, num_symbols)?;
        let mut enc = RansEncoder::new();
        for (&s, &ti) in symbols.iter().zip(table_index).rev() {
            let t = lookup(&tables, ti)?;
            if s as usize >= t.num_symbols() {
                return Err(Error::SymbolOutOfAlphabet { symbol: s as i64, size: t.num_symbols() });
            }
            enc.put(t.start(s as usize), t.freq(s as usize));
        }
        Ok(enc.finish().bytes)
    }

    /// Decodes `table_index.len()` symbols, starting a fresh stream when the
    /// cursor is at offset 0.
    pub fn decode(bytes: &[u8], cursor: &mut DecodeCursor, table_index: &[u32], cdfs: &[u32], num_symbols: usize) -> Result<Vec<u32>> {
        let tables = tables(cdfs, num_symbols)?;
        let mut dec = if cursor.offset == 0 {
            RansDecoder::new(bytes, table_index.len())?
        } else {
            RansDecoder::resume(bytes, cursor.state, cursor.offset as usize, table_index.len())
        };
        let mut out = Vec::with_capacity(table_index.len());
        for &ti in table_index {
            out.push(dec.get(lookup(&tables, ti)?)? as u32);
        }
        let (state, pos) = dec.cursor();
        *cursor = DecodeCursor { state, offset: pos as u64 };
        Ok(out)
    }
}

fn status(e: &Error) -> i32 {
    match e {
        Error::InvalidTable(_) => STATUS_BAD_TABLE,
        Error::SymbolOutOfAlphabet { .. } => STATUS_SYMBOL_RANGE,
        Error::Underflow { .. } => STATUS_UNDERFLOW,
        _ => STATUS_CORRUPT,
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> &'a [T] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(ptr, len)
    }
}

/// # Safety
/// `pmf` must hold `num_tables · num_symbols` values and `cdf_out`
/// room for `num_tables · (num_symbols + 1)`.
pub unsafe extern "C" fn fallback_build_tables(
    pmf: *const f64,
    num_tables: usize,
    num_symbols: usize,
    cdf_out: *mut u32,
) -> i32 {
    match flat::build_tables(slice(pmf, num_tables * num_symbols), num_symbols) {
        Ok(cdf) => {
            std::ptr::copy_nonoverlapping(cdf.as_ptr(), cdf_out, cdf.len());
            STATUS_OK
        }
        Err(e) => status(&e),
    }
}

/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fallback_encode(
    symbols: *const u32,
    table_index: *const u32,
    count: usize,
    cdfs: *const u32,
    num_tables: usize,
    num_symbols: usize,
    out: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> i32 {
    let cdfs = slice(cdfs, num_tables * (num_symbols + 1));
    match flat::encode(slice(symbols, count), slice(table_index, count), cdfs, num_symbols) {
        Ok(bytes) if bytes.len() <= capacity => {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
            *out_len = bytes.len();
            STATUS_OK
        }
        Ok(bytes) => {
            *out_len = bytes.len();
            STATUS_CAPACITY
        }
        Err(e) => status(&e),
    }
}

/// # Safety
/// Pointers must reference buffers of the stated lengths; `cursor` must be valid.
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fallback_decode(
    bytes: *const u8,
    len: usize,
    cursor: *mut DecodeCursor,
    table_index: *const u32,
    count: usize,
    cdfs: *const u32,
    num_tables: usize,
    num_symbols: usize,
    symbols_out: *mut u32,
) -> i32 {
    let cdfs = slice(cdfs, num_tables * (num_symbols + 1));
    let mut cur = *cursor;
    match flat::decode(slice(bytes, len), &mut cur, slice(table_index, count), cdfs, num_symbols) {
        Ok(symbols) => {
            std::ptr::copy_nonoverlapping(symbols.as_ptr(), symbols_out, symbols.len());
            *cursor = cur;
            STATUS_OK
        }
        Err(e) => status(&e),
    }
}

pub const FALLBACK: CoderVTable = CoderVTable {
    build_tables: fallback_build_tables,
    encode: fallback_encode,
    decode: fallback_decode,
};

fn check(code: i32, decoded: usize, expected: usize) -> Result<()> {
    match code {
        STATUS_OK => Ok(()),
        STATUS_BAD_TABLE => Err(Error::InvalidTable("rejected by external coder".into())),
        STATUS_SYMBOL_RANGE => Err(Error::Corrupt("symbol outside alphabet".into())),
        STATUS_UNDERFLOW => Err(Error::Underflow { decoded, expected }),
        STATUS_CAPACITY => Err(Error::Corrupt("output capacity exceeded".into())),
        other => Err(Error::Corrupt(format!("external coder status {other}"))),
    }
}

fn pack(tables: &[&CdfTable]) -> Result<(Vec<u32>, Vec<u32>, usize)> {
    let n = tables.first().map_or(1, |t| t.num_symbols());
    let mut cdfs = Vec::new();
    let mut index = Vec::with_capacity(tables.len());
    let mut last: Option<*const CdfTable> = None;
    let mut count = 0u32;
    for t in tables {
        if t.num_symbols() != n {
            return Err(Error::InvalidTable("external coder needs a uniform alphabet per call".into()));
        }
        let ptr = *t as *const CdfTable;
        if last != Some(ptr) {
            cdfs.extend_from_slice(t.cdf());
            last = Some(ptr);
            count += 1;
        }
        index.push(count - 1);
    }
    Ok((cdfs, index, n))
}

/// [`EntropyCoder`] backed by a [`CoderVTable`].
#[derive(Clone, Copy, Debug)]
pub struct ExternalCoder {
    vtable: CoderVTable,
}

impl ExternalCoder {
    pub fn new(vtable: CoderVTable) -> Self {
        Self { vtable }
    }

    pub fn build_tables(&self, pmf: &[f64], num_symbols: usize) -> Result<Vec<CdfTable>> {
        if num_symbols == 0 || pmf.len() % num_symbols != 0 {
            return Err(Error::InvalidTable(format!("{} probabilities for {num_symbols} symbols", pmf.len())));
        }
        let num_tables = pmf.len() / num_symbols;
        let mut out = vec![0u32; num_tables * (num_symbols + 1)];
        let code = unsafe { (self.vtable.build_tables)(pmf.as_ptr(), num_tables, num_symbols, out.as_mut_ptr()) };
        check(code, 0, 0)?;
        out.chunks(num_symbols + 1).map(|c| CdfTable::new(c.to_vec())).collect()
    }
}

impl EntropyCoder for ExternalCoder {
    fn encode(&self, symbols: &[usize], tables: &[&CdfTable]) -> Result<CodedBuffer> {
        if symbols.len() != tables.len() {
            return Err(Error::Shape(format!("{} symbols with {} tables", symbols.len(), tables.len())));
        }
        for (&s, t) in symbols.iter().zip(tables) {
            if s >= t.num_symbols() {
                return Err(Error::SymbolOutOfAlphabet { symbol: s as i64, size: t.num_symbols() });
            }
        }
        let (cdfs, index, n) = pack(tables)?;
        let syms: Vec<u32> = symbols.iter().map(|&s| s as u32).collect();
        let capacity = 8 + 2 * symbols.len();
        let mut out = vec![0u8; capacity];
        let mut len = 0usize;
        let code = unsafe {
            (self.vtable.encode)(
                syms.as_ptr(),
                index.as_ptr(),
                syms.len(),
                cdfs.as_ptr(),
                cdfs.len() / (n + 1),
                n,
                out.as_mut_ptr(),
                capacity,
                &mut len,
            )
        };
        check(code, 0, 0)?;
        out.truncate(len);
        Ok(CodedBuffer::new(out, symbols.len()))
    }

    fn decoder<'a>(&self, buffer: &'a CodedBuffer) -> Result<Box<dyn SymbolDecoder + 'a>> {
        buffer.verify()?;
        Ok(Box::new(ExternalDecoder { vtable: self.vtable, buffer, cursor: DecodeCursor::default(), decoded: 0 }))
    }
}

struct ExternalDecoder<'a> {
    vtable: CoderVTable,
    buffer: &'a CodedBuffer,
    cursor: DecodeCursor,
    decoded: usize,
}

impl SymbolDecoder for ExternalDecoder<'_> {
    fn decode(&mut self, tables: &[&CdfTable]) -> Result<Vec<usize>> {
        if tables.is_empty() {
            return Ok(Vec::new());
        }
        let (cdfs, index, n) = pack(tables)?;
        let mut out = vec![0u32; tables.len()];
        let code = unsafe {
            (self.vtable.decode)(
                self.buffer.bytes.as_ptr(),
                self.buffer.bytes.len(),
                &mut self.cursor,
                index.as_ptr(),
                index.len(),
                cdfs.as_ptr(),
                cdfs.len() / (n + 1),
                n,
                out.as_mut_ptr(),
            )
        };
        check(code, self.decoded, self.buffer.symbol_count)?;
        self.decoded += out.len();
        Ok(out.into_iter().map(|s| s as usize).collect())
    }

    fn finish(self: Box<Self>) -> Result<()> {
        let consumed = if self.decoded == 0 { 4 } else { self.cursor.offset as usize };
        if consumed == self.buffer.bytes.len() && (self.decoded == 0 || self.cursor.state == 1 << 23) {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("{} trailing bytes", self.buffer.bytes.len().saturating_sub(consumed))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::RansCoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundary_matches_built_in_coder() {
        let ext = ExternalCoder::new(FALLBACK);
        let pmf = [0.05, 0.2, 0.5, 0.2, 0.05, 0.3, 0.3, 0.2, 0.1, 0.1];
        let tables = ext.build_tables(&pmf, 5).unwrap();
        assert_eq!(tables[0], CdfTable::from_pmf(&pmf[..5]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let refs: Vec<&CdfTable> = (0..10_000).map(|_| &tables[rng.random_range(0..2)]).collect();
        let syms: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
        let a = ext.encode(&syms, &refs).unwrap();
        let b = RansCoder.encode(&syms, &refs).unwrap();
        assert_eq!(a, b);
        let mut dec = ext.decoder(&a).unwrap();
        let mut back = dec.decode(&refs[..4000]).unwrap();
        back.extend(dec.decode(&refs[4000..]).unwrap());
        dec.finish().unwrap();
        assert_eq!(back, syms);
    }

    #[test]
    fn empty_stream_over_boundary() {
        let ext = ExternalCoder::new(FALLBACK);
        let buf = ext.encode(&[], &[]).unwrap();
        assert_eq!(buf.bytes.len(), 4);
        assert!(ext.decode(&buf, &[]).unwrap().is_empty());
    }
}
