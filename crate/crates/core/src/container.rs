//! Self-describing binary container shared by symbol frames and weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! payload_len  u64
//! payload      payload_len bytes
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn write<W: Write>(mut out: W, magic: &[u8; 4], header: &serde_json::Value, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(payload)?;
    Ok(())
}

pub fn read<R: Read>(mut input: R, magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<u8>)> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let payload_len = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let mut payload = vec![0u8; payload_len];
    input.read_exact(&mut payload)?;
    Ok((header, payload))
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b)?;
    Ok(b)
}

pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn get_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("f64 array length not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Packs 0/1 values MSB-first into bytes, zero padded.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() != count.div_ceil(8) {
        return Err(Error::Format(format!("{} bytes cannot hold exactly {count} bits", bytes.len())));
    }
    Ok((0..count).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect())
}
