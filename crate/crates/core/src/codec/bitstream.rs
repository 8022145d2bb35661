//! Byte layout of a compressed image (`.abc`).
//!
//! ```text
//! "ABC1"            magic, 4 bytes
//! version           u8
//! height, width     u16 big-endian each, original image size
//! quality           u8  (Φ_D)
//! task              u8  (Φ_T)
//! h_s, g_s, merge   u8 each, generative edge variants
//! stages            u8  (S_intra)
//! tile              C·4 nibbles, high nibble first, ⌈C·4/2⌉ bytes
//! z payload         u32 big-endian length, rANS bytes, CRC-32
//! y payload         u32 big-endian length, rANS bytes, CRC-32
//! ```
//!
//! The channel-group count `C` is not stored; it is a property of the model.

use crate::error::{Error, Result};
use crate::structure::EdgeId;

pub const MAGIC: &[u8; 4] = b"ABC1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: u16,
    pub width: u16,
    pub quality: u8,
    pub task: u8,
    /// Variant indices of [`EdgeId::GENERATIVE`], in that order.
    pub generative: [u8; 3],
    pub stages: u8,
    pub tile: Vec<u8>,
}

impl Header {
    pub fn choice(&self, edge: EdgeId) -> Option<usize> {
        EdgeId::GENERATIVE.iter().position(|&e| e == edge).map(|i| self.generative[i] as usize)
    }

    pub fn encoded_len(groups: usize) -> usize {
        4 + 1 + 4 + 1 + 1 + 3 + 1 + (groups * 4).div_ceil(2)
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.push(self.quality);
        out.push(self.task);
        out.extend_from_slice(&self.generative);
        out.push(self.stages);
        for pair in self.tile.chunks(2) {
            let hi = pair[0] & 0x0f;
            let lo = pair.get(1).copied().unwrap_or(0) & 0x0f;
            out.push((hi << 4) | lo);
        }
    }

    /// Quality index of a stream, readable before the model is known.
    pub fn peek_quality(bytes: &[u8]) -> Result<usize> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a compressed image".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        Ok(bytes[9] as usize)
    }

    /// Parses a header for a model with `groups` channel groups; returns it
    /// with the number of bytes consumed.
    pub fn read(bytes: &[u8], groups: usize) -> Result<(Self, usize)> {
        let need = Self::encoded_len(groups);
        if bytes.len() < 5 {
            return Err(Error::Corrupt(format!("{} bytes cannot hold a header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < need {
            return Err(Error::Corrupt(format!("header needs {need} bytes, stream has {}", bytes.len())));
        }
        let height = u16::from_be_bytes([bytes[5], bytes[6]]);
        let width = u16::from_be_bytes([bytes[7], bytes[8]]);
        let quality = bytes[9];
        let task = bytes[10];
        let generative = [bytes[11], bytes[12], bytes[13]];
        let stages = bytes[14];
        let mut tile = Vec::with_capacity(groups * 4);
        for &b in &bytes[15..need] {
            tile.push(b >> 4);
            tile.push(b & 0x0f);
        }
        tile.truncate(groups * 4);
        if height == 0 || width == 0 {
            return Err(Error::Corrupt("zero image dimension".into()));
        }
        Ok((Self { height, width, quality, task, generative, stages, tile }, need))
    }
}

/// Header plus the two coded payloads (each including its CRC trailer).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload_z: Vec<u8>,
    pub payload_y: Vec<u8>,
}

fn read_payload<'a>(bytes: &'a [u8], pos: &mut usize, name: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + 4 {
        return Err(Error::Corrupt(format!("{name} payload length missing")));
    }
    let len = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    if bytes.len() < *pos + len {
        return Err(Error::Corrupt(format!(
            "{name} payload declares {len} bytes, {} present",
            bytes.len() - *pos
        )));
    }
    let out = &bytes[*pos..*pos + len];
    *pos += len;
    Ok(out)
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header.write(&mut out);
        for p in [&self.payload_z, &self.payload_y] {
            out.extend_from_slice(&(p.len() as u32).to_be_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], groups: usize) -> Result<Self> {
        let (header, mut pos) = Header::read(bytes, groups)?;
        let payload_z = read_payload(bytes, &mut pos, "z")?.to_vec();
        let payload_y = read_payload(bytes, &mut pos, "y")?.to_vec();
        if pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, payload_z, payload_y })
    }

    pub fn header_len(&self) -> usize {
        Header::encoded_len(self.header.tile.len() / 4)
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + 8 + self.payload_z.len() + self.payload_y.len()
    }
}
