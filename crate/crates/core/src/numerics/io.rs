//! Binary tensor files and 8-bit PGM images.
//!
//! Tensor file layout (all little-endian):
//!
//! ```text
//! offset 0      magic "HTNS"
//! offset 4      rank: u32
//! offset 8      dims: rank x u32
//! offset 8+4r   payload: product(dims) x f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HTNS";
const MAX_RANK: u32 = 16;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("truncated header: missing {what}"), offset as u64))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.get(..4) != Some(&MAGIC[..]) {
        return Err(Error::format("bad magic", 0));
    }
    let rank = read_u32(bytes, 4, "rank")?;
    if rank > MAX_RANK {
        return Err(Error::format(format!("rank {rank} exceeds {MAX_RANK}"), 4));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for i in 0..rank as usize {
        let offset = 8 + 4 * i;
        let d = read_u32(bytes, offset, "dimension")?;
        if d == 0 {
            return Err(Error::format("zero dimension", offset as u64));
        }
        count = count
            .checked_mul(d as usize)
            .filter(|&c| c <= (usize::MAX / 4))
            .ok_or_else(|| Error::format("dims overflow", offset as u64))?;
        dims.push(d as usize);
    }
    let start = 8 + 4 * rank as usize;
    let expected = start + 4 * count;
    if bytes.len() < expected {
        return Err(Error::format(
            format!(
                "truncated payload: expected {} bytes, found {}",
                expected,
                bytes.len()
            ),
            bytes.len() as u64,
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            "trailing bytes after payload",
            expected as u64,
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

/// Parses a binary (P5) PGM with maxval <= 255 into an `(h, w, 1)` tensor
/// scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::format("bad PGM magic (expected P5)", 0));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("expected decimal header field", start as u64));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("header field overflow", start as u64))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format("zero image dimension", 2));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            format!("unsupported maxval {maxval}"),
            pos as u64,
        ));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("missing whitespace after header", pos as u64));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(Error::format(
            format!("truncated pixel data: expected {} bytes", w * h),
            bytes.len() as u64,
        ));
    }
    let scale = 1.0 / maxval as f32;
    let data = payload[..w * h].iter().map(|&p| p as f32 * scale).collect();
    Tensor::new(vec![h, w, 1], data)
}

pub fn encode_pgm(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pgm(&fs::read(path)?)
}

/// Reads a tensor from either format, chosen by the file's leading bytes.
pub fn read_any(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_small() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(decode(&encode(&t)).unwrap(), t);
        let z = Tensor::new(vec![3], vec![0.0f32; 3]).unwrap();
        assert_eq!(decode(&encode(&z)).unwrap(), z);
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let mut bytes = encode(&Tensor::<f32>::zeros(&[1]));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic at offset 0");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode(&Tensor::<f32>::zeros(&[4]));
        let err = decode(&bytes[..bytes.len() - 2]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len() as u64 - 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn dims_overflow_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
        let mut big_rank = MAGIC.to_vec();
        big_rank.extend_from_slice(&1000u32.to_le_bytes());
        match decode(&big_rank).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let t = decode_pgm(&bytes).unwrap();
        assert_eq!(t.dims(), &[1, 2, 1]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_roundtrip_scaling() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let t = decode_pgm(&encode_pgm(&px, 4, 3)).unwrap();
        assert_eq!(t.dims(), &[3, 4, 1]);
        assert!((t.at(&[2, 3, 0]) - 220.0 / 255.0).abs() < 1e-7);
    }
}
