//! Flat little-endian float blobs with a 16-byte header and a trailing CRC32.
//!
//! Layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic (b"SFGE")
//! 4       2     format version (u16)
//! 6       2     element width in bytes: 4 (f32) or 8 (f64)
//! 8       4     dim (u32)
//! 12      4     count (u32)
//! 16      ..    count * dim elements, little-endian
//! end-4   4     CRC32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFGE";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

fn encode(width: u16, dim: usize, count: usize, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_f32(dim: usize, data: &[f32]) -> Vec<u8> {
    assert!(dim > 0 && data.len() % dim == 0);
    let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(4, dim, data.len() / dim, payload)
}

pub fn encode_f64(dim: usize, data: &[f64]) -> Vec<u8> {
    assert!(dim > 0 && data.len() % dim == 0);
    let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(8, dim, data.len() / dim, payload)
}

struct Decoded<'a> {
    width: u16,
    dim: usize,
    payload: &'a [u8],
}

fn decode<'a>(path: &Path, bytes: &'a [u8]) -> Result<Decoded<'a>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &body[HEADER_LEN..];
    if payload.len() != dim * count * width as usize {
        return Err(Error::format(path, "payload length disagrees with header"));
    }
    Ok(Decoded {
        width,
        dim,
        payload,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn write_f32(path: &Path, dim: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_f32(dim, data))?;
    Ok(())
}

pub fn write_f64(path: &Path, dim: usize, data: &[f64]) -> Result<()> {
    fs::write(path, encode_f64(dim, data))?;
    Ok(())
}

/// Reads an f32 blob, returning `(dim, values)`.
pub fn read_f32(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let d = decode(path, &bytes)?;
    if d.width != 4 {
        return Err(Error::format(path, format!("expected f32 blob, width {}", d.width)));
    }
    let vals = d
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((d.dim, vals))
}

/// Reads an f64 blob, returning `(dim, values)`.
pub fn read_f64(path: &Path) -> Result<(usize, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let d = decode(path, &bytes)?;
    if d.width != 8 {
        return Err(Error::format(path, format!("expected f64 blob, width {}", d.width)));
    }
    let vals = d
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((d.dim, vals))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let data = vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1, 0.2];
        write_f64(&p, 3, &data).unwrap();
        let (dim, back) = read_f64(&p).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn version_and_checksum_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_f32(&p, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut bytes = fs::read(&p).unwrap();
        bytes[HEADER_LEN + 1] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_f32(&p), Err(Error::Checksum(_))));

        let mut bytes = encode_f32(2, &[1.0, 2.0]);
        bytes[4] = 9;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_f32(&p), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(
            read_f32(&dir.path().join("nope.bin")),
            Err(Error::MissingFile(_))
        ));
    }
}
